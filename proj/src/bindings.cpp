#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <stdexcept>

#include "dadet/experiments.hpp"

namespace py = pybind11;
using namespace dadet;

namespace {

py::array_t<float> tensor_to_numpy(const Tensor& t) {
  const Shape& shape = t.shape();
  std::vector<py::ssize_t> dims(shape.begin(), shape.end());
  py::array_t<float> out(dims);
  std::memcpy(out.mutable_data(), t.data(), sizeof(float) * t.numel());
  return out;
}

Tensor numpy_to_image(const py::array& array) {
  auto arr = py::array_t<float, py::array::c_style | py::array::forcecast>::ensure(array);
  if (!arr || arr.ndim() != 3 || arr.shape(0) != 3)
    throw std::invalid_argument("image must be a [3, H, W] array");
  Shape shape{3, static_cast<int>(arr.shape(1)), static_cast<int>(arr.shape(2))};
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return Tensor(shape, std::move(data), false);
}

std::vector<std::vector<float>> to_feature_list(const py::object& obj) {
  return obj.cast<std::vector<std::vector<float>>>();
}

}  // namespace

PYBIND11_MODULE(_dadet, m) {
  m.doc() = "Domain-adaptive toy detector core";
  m.attr("__version__") = kToolVersion;

  py::class_<Box>(m, "Box")
      .def(py::init<>())
      .def(py::init([](float x1, float y1, float x2, float y2) {
             return Box{x1, y1, x2, y2};
           }),
           py::arg("x1"), py::arg("y1"), py::arg("x2"), py::arg("y2"))
      .def_readwrite("x1", &Box::x1)
      .def_readwrite("y1", &Box::y1)
      .def_readwrite("x2", &Box::x2)
      .def_readwrite("y2", &Box::y2)
      .def("area", &Box::area)
      .def("__repr__", [](const Box& b) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "Box(%.4g, %.4g, %.4g, %.4g)", b.x1, b.y1,
                      b.x2, b.y2);
        return std::string(buf);
      });

  m.def("iou", &iou, py::arg("a"), py::arg("b"),
        "Intersection over union of two boxes");
  m.def(
      "nms",
      [](const std::vector<Box>& boxes, const std::vector<float>& scores,
         float iou_threshold) {
        if (boxes.size() != scores.size())
          throw std::invalid_argument("boxes and scores differ in length");
        std::vector<ScoredBox> scored(boxes.size());
        for (std::size_t i = 0; i < boxes.size(); ++i)
          scored[i] = ScoredBox{boxes[i], scores[i]};
        return nms(scored, iou_threshold);
      },
      py::arg("boxes"), py::arg("scores"), py::arg("iou_threshold"),
      "Greedy non-maximum suppression; returns kept indices");

  py::class_<ShiftSpec>(m, "ShiftSpec")
      .def(py::init<>())
      .def_property(
          "kind", [](const ShiftSpec& s) { return std::string(shift_kind_name(s.kind)); },
          [](ShiftSpec& s, const std::string& name) {
            s.kind = shift_kind_from_name(name);
          })
      .def_readwrite("intensity", &ShiftSpec::intensity)
      .def_readwrite("scale_factor", &ShiftSpec::scale_factor);

  py::class_<DatasetSpec>(m, "DatasetSpec")
      .def(py::init<>())
      .def_readwrite("image_size", &DatasetSpec::image_size)
      .def_readwrite("num_images", &DatasetSpec::num_images)
      .def_readwrite("num_classes", &DatasetSpec::num_classes)
      .def_readwrite("min_objects", &DatasetSpec::min_objects)
      .def_readwrite("max_objects", &DatasetSpec::max_objects)
      .def_readwrite("min_object_size", &DatasetSpec::min_object_size)
      .def_readwrite("max_object_size", &DatasetSpec::max_object_size)
      .def_readwrite("shift", &DatasetSpec::shift)
      .def_readwrite("seed", &DatasetSpec::seed)
      .def_readwrite("domain", &DatasetSpec::domain)
      .def("validate", &DatasetSpec::validate);

  py::class_<Sample>(m, "Sample")
      .def_property_readonly("image",
                             [](const Sample& s) { return tensor_to_numpy(s.image); })
      .def_readonly("domain", &Sample::domain)
      .def_property_readonly("boxes",
                             [](const Sample& s) { return s.boxes(); })
      .def_property_readonly("labels",
                             [](const Sample& s) { return s.labels(); })
      .def_property_readonly("has_annotations", &Sample::has_annotations);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("spec", &Dataset::spec)
      .def_property_readonly("digest",
                             [](const Dataset& d) { return hex64(d.digest); })
      .def("__len__", [](const Dataset& d) { return d.samples.size(); })
      .def(
          "sample",
          [](const Dataset& d, int i) -> const Sample& {
            if (i < 0 || i >= static_cast<int>(d.samples.size()))
              throw py::index_error("sample index out of range");
            return d.samples[static_cast<std::size_t>(i)];
          },
          py::arg("index"), py::return_value_policy::reference_internal);

  m.def("build_dataset", &build_dataset, py::arg("spec"));
  m.def("make_dataset", &make_dataset, py::arg("spec"), py::arg("path"));
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
  m.def("resized_dataset", &resized_dataset, py::arg("dataset"), py::arg("factor"));

  py::class_<AblationMask>(m, "AblationMask")
      .def(py::init<>())
      .def(py::init([](bool img, bool ins, bool cst) {
             return AblationMask{img, ins, cst};
           }),
           py::arg("img"), py::arg("ins"), py::arg("cst"))
      .def_readwrite("img", &AblationMask::img)
      .def_readwrite("ins", &AblationMask::ins)
      .def_readwrite("cst", &AblationMask::cst);

  py::class_<DetectorConfig>(m, "DetectorConfig")
      .def(py::init<>())
      .def_readwrite("num_classes", &DetectorConfig::num_classes)
      .def_readwrite("pre_nms_top_n", &DetectorConfig::pre_nms_top_n)
      .def_readwrite("post_nms_top_n", &DetectorConfig::post_nms_top_n)
      .def_readwrite("score_floor", &DetectorConfig::score_floor)
      .def("validate", &DetectorConfig::validate);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("lambda_", &TrainConfig::lambda)
      .def_readwrite("lr_initial", &TrainConfig::lr_initial)
      .def_readwrite("lr_reduced", &TrainConfig::lr_reduced)
      .def_readwrite("lr_drop_iter", &TrainConfig::lr_drop_iter)
      .def_readwrite("total_iters", &TrainConfig::total_iters)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("grad_clip", &TrainConfig::grad_clip)
      .def_readwrite("ablation", &TrainConfig::ablation)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("eval_every", &TrainConfig::eval_every)
      .def_readwrite("adapt_rois", &TrainConfig::adapt_rois)
      .def("validate", &TrainConfig::validate);

  py::class_<LossBreakdown>(m, "LossBreakdown")
      .def_readonly("l_rpn", &LossBreakdown::l_rpn)
      .def_readonly("l_roi", &LossBreakdown::l_roi)
      .def_readonly("l_img", &LossBreakdown::l_img)
      .def_readonly("l_ins", &LossBreakdown::l_ins)
      .def_readonly("l_cst", &LossBreakdown::l_cst)
      .def_readonly("total", &LossBreakdown::total);

  py::class_<LogRow>(m, "LogRow")
      .def_readonly("iter", &LogRow::iter)
      .def_readonly("lr", &LogRow::lr)
      .def_readonly("losses", &LogRow::losses);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_readonly("iteration", &Checkpoint::iteration)
      .def_readonly("config", &Checkpoint::config)
      .def_readonly("det_cfg", &Checkpoint::det_cfg)
      .def_readonly("source_digest", &Checkpoint::source_digest)
      .def_readonly("target_digest", &Checkpoint::target_digest);

  m.def("save_checkpoint", &save_checkpoint, py::arg("checkpoint"), py::arg("path"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  py::class_<Snapshot>(m, "Snapshot")
      .def_readonly("iter", &Snapshot::iter)
      .def_readonly("mean_ap", &Snapshot::mean_ap);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("checkpoint", &TrainResult::checkpoint)
      .def_readonly("log", &TrainResult::log)
      .def_readonly("snapshots", &TrainResult::snapshots)
      .def_readonly("warnings", &TrainResult::warnings);

  m.def(
      "train",
      [](const TrainConfig& cfg, const DetectorConfig& dcfg, const Dataset& source,
         const Dataset& target, const std::string& log_path,
         const std::string& checkpoint_path, const Dataset* eval_ds,
         const Checkpoint* resume) {
        TrainOptions opts;
        opts.log_path = log_path;
        opts.checkpoint_path = checkpoint_path;
        opts.eval_ds = eval_ds;
        opts.resume = resume;
        return train(cfg, dcfg, source, target, opts);
      },
      py::arg("config"), py::arg("detector"), py::arg("source"), py::arg("target"),
      py::arg("log_path") = std::string(), py::arg("checkpoint_path") = std::string(),
      py::arg("eval_dataset") = nullptr, py::arg("resume") = nullptr,
      "Run the adversarial training loop; one source and one target image per iteration");

  py::class_<Detection>(m, "Detection")
      .def_readonly("box", &Detection::box)
      .def_readonly("category", &Detection::category)
      .def_readonly("score", &Detection::score);

  m.def(
      "detect",
      [](const Checkpoint& ck, const py::array& image) {
        return detect(numpy_to_image(image), ck.model.det, ck.det_cfg);
      },
      py::arg("checkpoint"), py::arg("image"),
      "Detections for a [3, H, W] image using the checkpointed model");

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("per_class_ap", &EvalReport::per_class_ap)
      .def_readonly("mean_ap", &EvalReport::mean_ap)
      .def_readonly("detection_count", &EvalReport::detection_count)
      .def_readonly("dataset_digest", &EvalReport::dataset_digest)
      .def_readonly("checkpoint_digest", &EvalReport::checkpoint_digest);

  m.def(
      "evaluate",
      [](const Checkpoint& ck, const Dataset& ds, float iou_thresh) {
        return evaluate_model(ck.model.det, ck.det_cfg, ds, iou_thresh);
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("iou_thresh") = 0.5f,
      "AP report for a checkpoint on an annotated dataset");

  m.def(
      "mean_best_overlap",
      [](const Checkpoint& ck, const Dataset& ds, int top_p) {
        return model_mean_best_overlap(ck.model.det, ck.det_cfg, ds, top_p);
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("top_p") = 64,
      "Mean best IoU of the top proposals against every ground truth");

  m.def(
      "pooled_backbone_features",
      [](const Checkpoint& ck, const Dataset& ds, int limit) {
        auto feats = pooled_backbone_features(ck.model.det, ck.det_cfg, ds, limit);
        py::array_t<float> out({static_cast<py::ssize_t>(feats.size()),
                                static_cast<py::ssize_t>(feats.empty() ? 0 : feats[0].size())});
        for (std::size_t i = 0; i < feats.size(); ++i)
          std::memcpy(out.mutable_data(static_cast<py::ssize_t>(i), 0), feats[i].data(),
                      sizeof(float) * feats[i].size());
        return out;
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("limit") = 0,
      "Global-average-pooled backbone descriptor per image, as an [N, C] array");

  py::class_<HDivergenceEstimate>(m, "HDivergenceEstimate")
      .def_readonly("err_source", &HDivergenceEstimate::err_source)
      .def_readonly("err_target", &HDivergenceEstimate::err_target)
      .def_readonly("d_h", &HDivergenceEstimate::d_h);

  m.def(
      "estimate_h_divergence",
      [](const py::object& feats_source, const py::object& feats_target) {
        return estimate_h_divergence(to_feature_list(feats_source),
                                     to_feature_list(feats_target));
      },
      py::arg("feats_source"), py::arg("feats_target"),
      "Held-out domain-classifier proxy for the H-divergence");
}
