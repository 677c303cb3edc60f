#include "segkit/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "segkit/autograd.hpp"
#include "segkit/error.hpp"
#include "segkit/losses.hpp"
#include "segkit/nn.hpp"
#include "segkit/optim.hpp"
#include "segkit/serialize.hpp"

namespace segkit::train {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// --- RunRecord persistence ---------------------------------------------------

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json report_json(const metrics::MetricsReport& r) {
  json per = json::array();
  for (const auto& v : r.per_class_iou) per.push_back(opt(v));
  return {{"per_class_iou", per},        {"mean_iou", opt(r.mean_iou)},
          {"pixel_accuracy", r.pixel_accuracy}, {"f1_macro", opt(r.f1_macro)},
          {"loss", r.loss},              {"iou_score", opt(r.iou_score)},
          {"f_score", opt(r.f_score)}};
}

metrics::MetricsReport report_from(const json& j) {
  metrics::MetricsReport r;
  for (const auto& v : j.at("per_class_iou")) r.per_class_iou.push_back(opt_from(v));
  r.mean_iou = opt_from(j.at("mean_iou"));
  r.pixel_accuracy = j.at("pixel_accuracy").get<double>();
  r.f1_macro = opt_from(j.at("f1_macro"));
  r.loss = j.at("loss").get<double>();
  r.iou_score = opt_from(j.at("iou_score"));
  r.f_score = opt_from(j.at("f_score"));
  return r;
}

}  // namespace

std::string to_json(const RunRecord& rec) {
  json config = json::object();
  for (const auto& [k, v] : rec.config) config[k] = v;
  json miou = json::array();
  for (const auto& v : rec.val_mean_iou) miou.push_back(opt(v));
  json j = {{"architecture", rec.architecture},
            {"backbone", rec.backbone},
            {"palette", rec.palette},
            {"parameter_count", rec.parameter_count},
            {"config", config},
            {"train_loss", rec.train_loss},
            {"val_loss", rec.val_loss},
            {"val_accuracy", rec.val_accuracy},
            {"val_mean_iou", miou},
            {"best_epoch", rec.best_epoch},
            {"wall_seconds", rec.wall_seconds},
            {"final_report", rec.final_report ? report_json(*rec.final_report) : json(nullptr)},
            {"error", rec.error}};
  return j.dump(2) + "\n";
}

RunRecord run_record_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    RunRecord rec;
    rec.architecture = j.at("architecture").get<std::string>();
    rec.backbone = j.at("backbone").get<std::string>();
    rec.palette = j.at("palette").get<std::string>();
    rec.parameter_count = j.at("parameter_count").get<std::size_t>();
    for (const auto& [k, v] : j.at("config").items()) rec.config.emplace_back(k, v.get<std::string>());
    rec.train_loss = j.at("train_loss").get<std::vector<double>>();
    rec.val_loss = j.at("val_loss").get<std::vector<double>>();
    rec.val_accuracy = j.at("val_accuracy").get<std::vector<double>>();
    for (const auto& v : j.at("val_mean_iou")) rec.val_mean_iou.push_back(opt_from(v));
    rec.best_epoch = j.at("best_epoch").get<std::size_t>();
    rec.wall_seconds = j.at("wall_seconds").get<double>();
    if (!j.at("final_report").is_null()) rec.final_report = report_from(j.at("final_report"));
    rec.error = j.at("error").get<std::string>();
    const std::size_t n = rec.train_loss.size();
    if (rec.val_loss.size() != n || rec.val_accuracy.size() != n || rec.val_mean_iou.size() != n) {
      fail(Errc::kBadFormat, "run record epoch sequences differ in length");
    }
    return rec;
  } catch (const json::exception& e) {
    fail(Errc::kBadFormat, std::string("run record: ") + e.what());
  }
}

void save_run_record(const fs::path& path, const RunRecord& record) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::kMissingFile, "cannot write " + path.string());
  out << to_json(record);
}

RunRecord load_run_record(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kMissingFile, "run record " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return run_record_from_json(ss.str());
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.detail());
  }
}

// --- evaluation --------------------------------------------------------------

EvalOptions EvalOptions::from(const TrainConfig& cfg, std::size_t data_classes) {
  EvalOptions o;
  o.batch_size = cfg.batch_size;
  o.resize_h = cfg.resize_h;
  o.resize_w = cfg.resize_w;
  o.threshold = cfg.eval_threshold;
  o.loss = cfg.loss;
  o.absent_class_policy = cfg.absent_class_policy;
  o.data_classes = data_classes;
  return o;
}

namespace {

// Restores the module's training flag on scope exit.
class InferenceMode {
 public:
  explicit InferenceMode(nn::Module& m) : m_(m), was_(m.training()) { m_.set_training(false); }
  ~InferenceMode() { m_.set_training(was_); }

 private:
  nn::Module& m_;
  bool was_;
};

std::string where(std::size_t epoch, std::size_t batch) {
  return (epoch ? "epoch " + std::to_string(epoch) + " " : std::string()) + "batch " + std::to_string(batch);
}

}  // namespace

Evaluation evaluate(models::SegmentationModel& model, const data::SampleSource& source,
                    const EvalOptions& options) {
  const std::size_t k = model.config().num_classes;
  if (options.data_classes != 0 && options.data_classes != k) {
    fail(Errc::kClassCountMismatch, "model predicts " + std::to_string(k) + " classes, data has " +
                                        std::to_string(options.data_classes));
  }
  if (!(options.threshold > 0 && options.threshold < 1)) {
    fail(Errc::kBadThreshold, "threshold must be in (0, 1)");
  }
  Evaluation ev{metrics::ConfusionMatrix(k), {}};
  if (source.size() == 0) fail(Errc::kEmptyMatrix, "nothing to evaluate");

  InferenceMode inference(model);
  NoGradGuard no_grad;
  data::BatchOptions bo;
  bo.batch_size = options.batch_size;
  bo.resize_h = options.resize_h;
  bo.resize_w = options.resize_w;
  bo.shuffle = false;
  data::BatchIterator it(source, k, bo);

  // Loss is a pixel-weighted mean; thresholded scores pool binary counts per
  // channel over the whole source so that batching cannot change them.
  double loss_sum = 0.0;
  std::size_t pixels = 0;
  std::vector<std::uint64_t> tp(k, 0), fp(k, 0), fn(k, 0);
  std::size_t b = 0;
  while (auto batch = it.next()) {
    try {
      const auto pred = model.predict(batch->images);
      const std::size_t n_px = batch->labels.size();
      loss_sum += losses::compute_loss(options.loss, batch->onehot, pred.probabilities).item() *
                  static_cast<double>(n_px);
      pixels += n_px;
      ev.confusion.accumulate(pred.labels, batch->labels);
      const auto p = pred.probabilities.data();
      const auto y = batch->onehot.data();
      const std::size_t plane = batch->images.dim(2) * batch->images.dim(3);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const std::size_t c = (i / plane) % k;
        const bool pos = p[i] >= options.threshold, truth = y[i] > 0.5;
        if (pos && truth) ++tp[c];
        else if (pos) ++fp[c];
        else if (truth) ++fn[c];
      }
    } catch (const Error& e) {
      fail(e.code(), "evaluation " + where(0, b) + ": " + e.detail());
    }
    ++b;
  }
  ev.report = metrics::make_report(ev.confusion, loss_sum / static_cast<double>(pixels),
                                   options.absent_class_policy);
  double iou = 0, f = 0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double denom = static_cast<double>(tp[c] + fp[c] + fn[c]);
    if (denom == 0) continue;
    iou += static_cast<double>(tp[c]) / denom;
    f += 2.0 * static_cast<double>(tp[c]) / (denom + static_cast<double>(tp[c]));
    ++defined;
  }
  if (defined) {
    ev.report.iou_score = iou / static_cast<double>(defined);
    ev.report.f_score = f / static_cast<double>(defined);
  }
  return ev;
}

// --- state and checkpoints ---------------------------------------------------

ModelState capture_state(models::SegmentationModel& model) {
  ModelState s;
  for (const auto& p : model.named_parameters()) s.parameters.emplace_back(p.name, p.tensor->clone());
  for (const auto& b : model.named_buffers()) s.buffers.emplace_back(b.name, *b.values);
  return s;
}

void restore_state(models::SegmentationModel& model, const ModelState& state) {
  auto params = model.named_parameters();
  auto buffers = model.named_buffers();
  if (params.size() != state.parameters.size() || buffers.size() != state.buffers.size()) {
    fail(Errc::kBadFormat, "state does not match the model layout");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, value] = state.parameters[i];
    Tensor& dst = *params[i].tensor;
    if (params[i].name != name || dst.shape() != value.shape()) {
      fail(Errc::kBadFormat, "state entry '" + name + "' does not match parameter '" + params[i].name + "'");
    }
    std::copy(value.data().begin(), value.data().end(), dst.mutable_data().begin());
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    const auto& [name, values] = state.buffers[i];
    if (buffers[i].name != name || buffers[i].values->size() != values.size()) {
      fail(Errc::kBadFormat, "state entry '" + name + "' does not match buffer '" + buffers[i].name + "'");
    }
    *buffers[i].values = values;
  }
}

namespace {

constexpr std::string_view kCheckpointMagic = "segkit-checkpoint 1";

std::string shape_text(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? "x" : "") + std::to_string(shape[i]);
  return out;
}

struct CheckpointFile {
  Settings settings;
  ModelState state;
};

CheckpointFile read_checkpoint_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kMissingFile, "checkpoint " + path.string());
  auto bad = [&](const std::string& what) { fail(Errc::kBadFormat, path.string() + ": " + what); };
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) bad("not a segkit checkpoint");
  std::size_t n = 0;
  if (!std::getline(in, line) || std::sscanf(line.c_str(), "settings %zu", &n) != 1) bad("missing settings");
  std::string text;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) bad("truncated settings");
    text += line + "\n";
  }
  CheckpointFile ck;
  ck.settings = parse_settings(text, path.string());
  if (!std::getline(in, line) || std::sscanf(line.c_str(), "tensors %zu", &n) != 1) bad("missing tensors");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) bad("truncated tensor list");
    std::istringstream fields(line);
    std::string kind, name, shape;
    if (!(fields >> kind >> name >> shape)) bad("malformed entry '" + line + "'");
    Tensor t = read_tensor(in);
    if (shape_text(t.shape()) != shape) bad("entry '" + name + "' declares " + shape + " but holds " + shape_text(t.shape()));
    if (kind == "param") {
      ck.state.parameters.emplace_back(name, std::move(t));
    } else if (kind == "buffer") {
      ck.state.buffers.emplace_back(name, std::vector<double>(t.data().begin(), t.data().end()));
    } else {
      bad("unknown entry '" + kind + "'");
    }
  }
  return ck;
}

}  // namespace

void save_checkpoint(const fs::path& path, models::SegmentationModel& model, const TrainConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::kMissingFile, "cannot write " + path.string());
  const Settings settings = to_settings(cfg);
  const ModelState state = capture_state(model);
  // Text manifest (settings, then "kind name shape" per entry), each entry
  // followed by its SEGKT1 blob.
  out << kCheckpointMagic << '\n' << "settings " << settings.size() << '\n' << render_settings(settings);
  out << "tensors " << state.parameters.size() + state.buffers.size() << '\n';
  for (const auto& [name, t] : state.parameters) {
    out << "param " << name << ' ' << shape_text(t.shape()) << '\n';
    write_tensor(out, t);
  }
  for (const auto& [name, v] : state.buffers) {
    out << "buffer " << name << ' ' << v.size() << '\n';
    write_tensor(out, Tensor::create({v.size()}, v));
  }
}

Checkpoint load_checkpoint(const fs::path& path) {
  CheckpointFile file = read_checkpoint_file(path);
  Checkpoint ck;
  apply_settings(ck.config, file.settings);
  ck.model = models::build_model(ck.config.model, ck.config.seed);
  if (ck.config.freeze_encoder) ck.model->encoder().freeze();
  try {
    restore_state(*ck.model, file.state);
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.detail());
  }
  return ck;
}

void load_encoder(models::SegmentationModel& model, const fs::path& path) {
  const CheckpointFile file = read_checkpoint_file(path);
  ModelState mine = capture_state(model);
  std::size_t copied = 0;
  auto find = [](const auto& entries, const std::string& name) {
    return std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.first == name; });
  };
  for (auto& [name, t] : mine.parameters) {
    if (name.rfind("encoder.", 0) != 0) continue;
    const auto it = find(file.state.parameters, name);
    if (it == file.state.parameters.end() || it->second.shape() != t.shape()) {
      fail(Errc::kBadFormat, path.string() + ": no matching encoder parameter '" + name + "'");
    }
    t = it->second.clone();
    ++copied;
  }
  for (auto& [name, v] : mine.buffers) {
    if (name.rfind("encoder.", 0) != 0) continue;
    const auto it = find(file.state.buffers, name);
    if (it == file.state.buffers.end() || it->second.size() != v.size()) {
      fail(Errc::kBadFormat, path.string() + ": no matching encoder buffer '" + name + "'");
    }
    v = it->second;
  }
  if (copied == 0) fail(Errc::kBadFormat, path.string() + ": model has no encoder parameters");
  restore_state(model, mine);
}

// --- training ----------------------------------------------------------------

namespace {

bool better(const std::optional<double>& miou, double loss, const std::optional<double>& best_miou,
            double best_loss, bool have_best) {
  if (!have_best) return true;
  const double a = miou.value_or(-1.0), b = best_miou.value_or(-1.0);
  if (a != b) return a > b;
  return loss < best_loss;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const data::SampleSource& train_set,
                  const data::SampleSource& val_set, const TrainOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const std::size_t k = cfg.model.num_classes;
  if (options.data_classes != 0 && options.data_classes != k) {
    fail(Errc::kClassCountMismatch, "num_classes is " + std::to_string(k) + " but the palette has " +
                                        std::to_string(options.data_classes) + " classes");
  }
  if (train_set.size() == 0) fail(Errc::kBadManifest, "training set is empty");

  TrainResult result;
  RunRecord& rec = result.record;
  rec.config = to_settings(cfg);
  rec.architecture = std::string(models::to_string(cfg.model.architecture));
  rec.backbone = std::string(models::to_string(cfg.model.backbone.family));
  rec.palette = options.palette_name;

  result.model = models::build_model(cfg.model, cfg.seed);
  auto& model = *result.model;
  if (!cfg.encoder_checkpoint.empty()) load_encoder(model, cfg.encoder_checkpoint);
  if (cfg.freeze_encoder) model.encoder().freeze();
  rec.parameter_count = model.parameter_count();

  optim::Adam adam(optim::AdamConfig{cfg.learning_rate});
  const auto params = model.named_parameters();
  const EvalOptions eval_opts = EvalOptions::from(cfg, options.data_classes);
  data::BatchOptions bo;
  bo.batch_size = cfg.batch_size;
  bo.seed = cfg.seed;
  bo.resize_h = cfg.resize_h;
  bo.resize_w = cfg.resize_w;

  ModelState best_state;
  bool have_best = false;
  std::optional<double> best_miou;
  double best_loss = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model.set_training(true);
    data::BatchIterator it(train_set, k, bo, epoch - 1);
    double loss_sum = 0;
    std::size_t samples = 0, b = 0;
    while (true) {
      std::optional<data::Batch> batch;
      try {
        batch = it.next();
        if (!batch) break;
        Tape tape;
        const Tensor probs = nn::softmax_channel(model.forward(batch->images));
        const Tensor loss = losses::compute_loss(cfg.loss, batch->onehot, probs);
        const double value = loss.item();
        if (!std::isfinite(value)) fail(Errc::kNumericFailure, "loss is " + std::to_string(value));
        const Gradients grads = tape.backward(loss);
        adam.step(params, grads);
        loss_sum += value * static_cast<double>(batch->size());
        samples += batch->size();
      } catch (const Error& e) {
        fail(e.code(), where(epoch, b) + ": " + e.detail());
      }
      ++b;
    }
    const Evaluation ev = evaluate(model, val_set, eval_opts);
    rec.train_loss.push_back(loss_sum / static_cast<double>(samples));
    rec.val_loss.push_back(ev.report.loss);
    rec.val_accuracy.push_back(ev.report.pixel_accuracy);
    rec.val_mean_iou.push_back(ev.report.mean_iou);
    if (better(ev.report.mean_iou, ev.report.loss, best_miou, best_loss, have_best)) {
      have_best = true;
      best_miou = ev.report.mean_iou;
      best_loss = ev.report.loss;
      best_state = capture_state(model);
      rec.best_epoch = epoch;
      rec.final_report = ev.report;
      if (!options.checkpoint.empty()) save_checkpoint(options.checkpoint, model, cfg);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (options.on_epoch) options.on_epoch(rec);
  }
  restore_state(model, best_state);
  model.set_training(false);
  return result;
}

}  // namespace segkit::train
