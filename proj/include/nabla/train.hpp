#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nabla/checkpoint.hpp"
#include "nabla/data.hpp"
#include "nabla/loss.hpp"
#include "nabla/metrics.hpp"
#include "nabla/model.hpp"
#include "nabla/optim.hpp"

namespace nabla {

enum class Task { Segment, Classify };
enum class OptimizerKind { Adam, Sgd };
enum class Schedule { Constant, Step };

inline std::string to_string(Task t) { return t == Task::Segment ? "segment" : "classify"; }
inline std::string to_string(OptimizerKind o) { return o == OptimizerKind::Adam ? "adam" : "sgd"; }
inline std::string to_string(Schedule s) { return s == Schedule::Constant ? "constant" : "step"; }

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthConfig {
  std::size_t n = 8;
  std::size_t size = 0;  // 0: the model input size
  std::size_t classes = 3;
  std::uint64_t seed = 0;
};

/// Everything a training run needs. Defaults per task come from defaults().
struct RunConfig {
  Task task = Task::Segment;
  ModelSpec model = ModelSpec::nabla();
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 3e-4;
  double momentum = 0.9;
  Schedule lr_schedule = Schedule::Constant;
  int lr_step_period = 50;
  double lr_step_factor = 10.0;
  int epochs = 250;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::string data_dir;
  std::optional<SynthConfig> synth;
  double train_fraction = 0.8;  // >= 1 trains on everything
  std::optional<std::size_t> train_count, test_count;
  double val_fraction = 0.1;
  bool augment = true;
  std::string transfer_from;
  std::string out_dir = "run";
  int checkpoint_every = 10;
  double threshold = 0.5;

  static RunConfig defaults(Task task) {
    RunConfig c;
    c.task = task;
    if (task == Task::Classify) {
      c.model = ModelSpec::irrcnn(7);
      c.optimizer = OptimizerKind::Sgd;
      c.lr = 0.01;
      c.lr_schedule = Schedule::Step;
      c.epochs = 150;
      c.train_fraction = 0.7;
    }
    return c;
  }

  std::string loss() const { return task == Task::Segment ? "bce" : "cce"; }

  double lr_at(int epoch) const {
    return lr_schedule == Schedule::Step ? nabla::lr_schedule(epoch, lr, lr_step_period, lr_step_factor) : lr;
  }

  /// Epochs (0-based) at which the learning rate changes during the run.
  std::vector<int> lr_decay_epochs() const {
    std::vector<int> out;
    for (int e = 1; e < epochs; ++e)
      if (lr_at(e) != lr_at(e - 1)) out.push_back(e);
    return out;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid config: " + m); };
    if (task == Task::Segment && model.family != Family::Nabla) fail("task segment needs a nabla model");
    if (task == Task::Classify && model.family != Family::Irrcnn) fail("task classify needs an irrcnn model");
    if (!(lr > 0)) fail("lr must be positive");
    if (momentum < 0 || momentum >= 1) fail("momentum must lie in [0, 1)");
    if (lr_step_period < 1 || !(lr_step_factor > 0)) fail("lr step period/factor must be positive");
    if (epochs < 1) fail("epochs must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(train_fraction > 0)) fail("train_fraction must be positive");
    if (val_fraction < 0 || val_fraction >= 1) fail("val_fraction must lie in [0, 1)");
    if (checkpoint_every < 1) fail("checkpoint_every must be >= 1");
    if (!(threshold > 0 && threshold < 1)) fail("threshold must lie in (0, 1)");
    if (synth && task == Task::Classify && (synth->classes != model.classes)) {
      fail("synth.classes (" + std::to_string(synth->classes) + ") differs from model.classes (" +
           std::to_string(model.classes) + ")");
    }
    model.validate();
  }
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::json model = c.model;
  nlohmann::ordered_json j;
  j["task"] = to_string(c.task);
  j["loss"] = c.loss();
  j["optimizer"] = to_string(c.optimizer);
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["lr_schedule"] = to_string(c.lr_schedule);
  j["lr_step_period"] = c.lr_step_period;
  j["lr_step_factor"] = c.lr_step_factor;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir;
  if (c.synth) j["synth"] = {{"n", c.synth->n}, {"size", c.synth->size}, {"classes", c.synth->classes}, {"seed", c.synth->seed}};
  j["train_fraction"] = c.train_fraction;
  if (c.train_count) j["train_count"] = *c.train_count;
  if (c.test_count) j["test_count"] = *c.test_count;
  j["val_fraction"] = c.val_fraction;
  j["augment"] = c.augment;
  j["transfer_from"] = c.transfer_from;
  j["out_dir"] = c.out_dir;
  j["checkpoint_every"] = c.checkpoint_every;
  j["threshold"] = c.threshold;
  j["model"] = nlohmann::ordered_json::parse(model.dump());
  return j;
}

namespace detail {

template <typename V>
V field(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("invalid config: field '") + key + "' has the wrong type");
  }
}

inline nlohmann::json parse_override_value(const std::string& v) {
  try {
    return nlohmann::json::parse(v);
  } catch (const nlohmann::json::parse_error&) {
    return v;  // bare strings such as optimizer=sgd
  }
}

}  // namespace detail

/// `key=value` with a dotted key (model.widths=[4,8,16]); the value is JSON
/// when it parses as JSON, a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not key=value");
  std::string pointer;
  std::stringstream keys(kv.substr(0, eq));
  for (std::string part; std::getline(keys, part, '.');) pointer += "/" + part;
  j[nlohmann::json::json_pointer(pointer)] = detail::parse_override_value(kv.substr(eq + 1));
}

/// Unknown keys are rejected so that typos never silently fall back to defaults.
inline RunConfig parse_run_config(nlohmann::json j, const std::vector<std::string>& overrides = {}) {
  if (!j.is_object()) throw ConfigError("invalid config: top level must be a JSON object");
  for (const auto& kv : overrides) apply_override(j, kv);
  const std::string task = j.value("task", std::string("segment"));
  if (task != "segment" && task != "classify") throw ConfigError("invalid config: task must be segment|classify");
  RunConfig c = RunConfig::defaults(task == "segment" ? Task::Segment : Task::Classify);
  for (const auto& [key, value] : j.items()) {
    if (key == "task") continue;
    if (key == "loss") {
      if (value != c.loss()) throw ConfigError("invalid config: task " + task + " trains with " + c.loss() + " loss");
    } else if (key == "optimizer") {
      const auto s = detail::field<std::string>(j, "optimizer");
      if (s != "adam" && s != "sgd") throw ConfigError("invalid config: optimizer must be adam|sgd");
      c.optimizer = s == "adam" ? OptimizerKind::Adam : OptimizerKind::Sgd;
    } else if (key == "lr_schedule") {
      const auto s = detail::field<std::string>(j, "lr_schedule");
      if (s != "constant" && s != "step") throw ConfigError("invalid config: lr_schedule must be constant|step");
      c.lr_schedule = s == "constant" ? Schedule::Constant : Schedule::Step;
    } else if (key == "model") {
      if (!value.is_object()) throw ConfigError("invalid config: model must be an object");
      nlohmann::json base = c.model;
      base.merge_patch(value);
      try {
        c.model = base.get<ModelSpec>();
      } catch (const std::exception& e) {
        throw ConfigError(std::string("invalid config: model: ") + e.what());
      }
    } else if (key == "synth") {
      if (value.is_null()) continue;
      SynthConfig s;
      for (const auto& [k, v] : value.items()) {
        if (k == "n") s.n = detail::field<std::size_t>(value, "n");
        else if (k == "size") s.size = detail::field<std::size_t>(value, "size");
        else if (k == "classes") s.classes = detail::field<std::size_t>(value, "classes");
        else if (k == "seed") s.seed = detail::field<std::uint64_t>(value, "seed");
        else throw ConfigError("invalid config: unknown key 'synth." + k + "'");
      }
      c.synth = s;
    } else if (key == "lr") c.lr = detail::field<double>(j, "lr");
    else if (key == "momentum") c.momentum = detail::field<double>(j, "momentum");
    else if (key == "lr_step_period") c.lr_step_period = detail::field<int>(j, "lr_step_period");
    else if (key == "lr_step_factor") c.lr_step_factor = detail::field<double>(j, "lr_step_factor");
    else if (key == "epochs") c.epochs = detail::field<int>(j, "epochs");
    else if (key == "batch_size") c.batch_size = detail::field<std::size_t>(j, "batch_size");
    else if (key == "seed") c.seed = detail::field<std::uint64_t>(j, "seed");
    else if (key == "data_dir") c.data_dir = detail::field<std::string>(j, "data_dir");
    else if (key == "train_fraction") c.train_fraction = detail::field<double>(j, "train_fraction");
    else if (key == "train_count") c.train_count = detail::field<std::size_t>(j, "train_count");
    else if (key == "test_count") c.test_count = detail::field<std::size_t>(j, "test_count");
    else if (key == "val_fraction") c.val_fraction = detail::field<double>(j, "val_fraction");
    else if (key == "augment") c.augment = detail::field<bool>(j, "augment");
    else if (key == "transfer_from") c.transfer_from = detail::field<std::string>(j, "transfer_from");
    else if (key == "out_dir") c.out_dir = detail::field<std::string>(j, "out_dir");
    else if (key == "checkpoint_every") c.checkpoint_every = detail::field<int>(j, "checkpoint_every");
    else if (key == "threshold") c.threshold = detail::field<double>(j, "threshold");
    else throw ConfigError("invalid config: unknown key '" + key + "'");
  }
  c.model.seed = c.seed;
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(std::move(j), overrides);
}

// ------------------------------------------------------------------ datasets

template <typename Record>
struct DataSplits {
  std::vector<Record> train, val, test;
};

namespace detail {

template <typename Record>
DataSplits<Record> partition(std::vector<Record> all, const RunConfig& c) {
  for (auto& r : all) r = resize(r, c.model.input_size);
  DataSplits<Record> s;
  std::vector<Record> pool;
  if (c.train_fraction < 1.0 || c.train_count || c.test_count) {
    const auto plan = split(all, std::min(c.train_fraction, 0.999999), c.seed, {c.train_count, c.test_count});
    pool = select(all, plan.train_ids);
    s.test = select(all, plan.test_ids);
  } else {
    pool = std::move(all);
  }
  const auto n_val = static_cast<std::size_t>(std::llround(c.val_fraction * double(pool.size())));
  if (n_val > 0 && n_val < pool.size()) {
    const auto plan = split(pool, 1.0 - c.val_fraction, c.seed + 1, {.test = n_val});
    s.train = select(pool, plan.train_ids);
    s.val = select(pool, plan.test_ids);
  } else {
    s.train = std::move(pool);
  }
  if (c.augment) s.train = augment_flips(s.train);
  if (s.train.empty()) throw DataError("training split is empty");
  return s;
}

inline std::size_t synth_size(const RunConfig& c) { return c.synth->size ? c.synth->size : c.model.input_size; }

}  // namespace detail

inline DataSplits<SegRecord> prepare_segmentation_data(const RunConfig& c) {
  if (c.synth) {
    const std::size_t s = detail::synth_size(c);
    return detail::partition(synth_lesions(c.synth->n, s, s, c.synth->seed).records, c);
  }
  if (c.data_dir.empty()) throw DataError("config names neither data_dir nor synth");
  const fs::path d(c.data_dir);
  if (detect_dataset(d) != DatasetKind::Segmentation) throw DataError(c.data_dir + " is not a segmentation dataset");
  return detail::partition(load_segmentation_dataset(d / "images", d / "masks"), c);
}

inline DataSplits<ClsRecord> prepare_classification_data(const RunConfig& c) {
  if (c.synth) {
    const std::size_t s = detail::synth_size(c);
    return detail::partition(synth_lesion_classes(c.synth->n, s, s, c.synth->classes, c.synth->seed), c);
  }
  if (c.data_dir.empty()) throw DataError("config names neither data_dir nor synth");
  const fs::path d(c.data_dir);
  if (detect_dataset(d) != DatasetKind::Classification) throw DataError(c.data_dir + " is not a classification dataset");
  auto recs = load_classification_dataset(d / "images", d / "labels.csv");
  for (const auto& r : recs) {
    if (r.label < 0 || std::size_t(r.label) >= c.model.classes) {
      throw DataError("label " + std::to_string(r.label) + " of '" + r.id + "' outside the model's " +
                      std::to_string(c.model.classes) + " classes");
    }
  }
  return detail::partition(std::move(recs), c);
}

// ---------------------------------------------------------------- inference

/// Infer-mode probabilities for records, batch by batch, in record order.
template <typename Record>
std::vector<Tensor<float>> predict_batches(Model<float>& model, const std::vector<Record>& records,
                                           std::size_t batch_size = 8) {
  std::vector<Tensor<float>> out;
  if (records.empty()) return out;
  for (const auto& idx : epoch_batches(records.size(), batch_size, 0, 0, false)) {
    const auto b = make_batch<float>(records, idx, model.spec().in_channels);
    out.push_back(model.spec().family == Family::Nabla ? forward_segment(model, b.images, Mode::Infer)
                                                       : forward_classify(model, b.images, Mode::Infer));
  }
  return out;
}

inline int argmax_row(const Tensor<float>& probs, std::size_t n) {
  const std::size_t k = probs.shape().c;
  const auto row = probs.data().subspan(n * k, k);
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Binarized infer-mode masks, one per record.
inline std::vector<Mask> predict_masks(Model<float>& model, const std::vector<SegRecord>& records, double threshold) {
  std::vector<Mask> out;
  for (const auto& probs : predict_batches(model, records)) {
    const std::size_t plane = probs.shape().plane();
    for (std::size_t n = 0; n < probs.shape().n; ++n) {
      out.push_back(binarize(probs.data().subspan(n * plane, plane), threshold));
    }
  }
  return out;
}

inline std::vector<int> predict_labels(Model<float>& model, const std::vector<ClsRecord>& records) {
  std::vector<int> out;
  for (const auto& probs : predict_batches(model, records))
    for (std::size_t n = 0; n < probs.shape().n; ++n) out.push_back(argmax_row(probs, n));
  return out;
}

/// Micro and per-image-mean reports over a segmentation set.
inline std::vector<MetricsReport> evaluate_segmentation(Model<float>& model, const std::vector<SegRecord>& records,
                                                        double threshold = 0.5) {
  const auto preds = predict_masks(model, records, threshold);
  std::vector<Mask> gts;
  for (const auto& r : records) gts.push_back(to_mask(r.mask));
  return {evaluate_dataset(preds, gts, Aggregation::Micro), evaluate_dataset(preds, gts, Aggregation::PerImageMean)};
}

inline ClassificationReport evaluate_classification(Model<float>& model, const std::vector<ClsRecord>& records) {
  std::vector<int> truth;
  for (const auto& r : records) truth.push_back(r.label);
  return classification_report(predict_labels(model, records), truth, static_cast<int>(model.spec().classes));
}

struct EvalResult {
  Task task = Task::Segment;
  std::size_t count = 0;
  std::vector<MetricsReport> segmentation;
  ClassificationReport classification;

  void write_csv(std::ostream& os) const {
    if (task == Task::Segment) write_metrics_csv(os, segmentation);
    else write_classification_csv(os, classification);
  }
};

/// Evaluates every record of a dataset directory at the model's input size.
inline EvalResult evaluate(Model<float>& model, const fs::path& data_dir, double threshold = 0.5) {
  const DatasetKind kind = detect_dataset(data_dir);
  const bool seg_model = model.spec().family == Family::Nabla;
  if ((kind == DatasetKind::Segmentation) != seg_model) {
    throw std::invalid_argument("checkpoint is a " + std::string(seg_model ? "segmentation" : "classification") +
                                " model but " + data_dir.string() + " is a " +
                                (kind == DatasetKind::Segmentation ? "segmentation" : "classification") + " dataset");
  }
  EvalResult r;
  const std::size_t size = model.spec().input_size;
  if (seg_model) {
    auto recs = load_segmentation_dataset(data_dir / "images", data_dir / "masks");
    if (recs.empty()) throw DataError("no records in " + data_dir.string());
    for (auto& rec : recs) rec = resize(rec, size);
    r.task = Task::Segment;
    r.count = recs.size();
    r.segmentation = evaluate_segmentation(model, recs, threshold);
  } else {
    auto recs = load_classification_dataset(data_dir / "images", data_dir / "labels.csv");
    if (recs.empty()) throw DataError("no records in " + data_dir.string());
    for (auto& rec : recs) rec = resize(rec, size);
    r.task = Task::Classify;
    r.count = recs.size();
    r.classification = evaluate_classification(model, recs);
  }
  return r;
}

// ------------------------------------------------------------------ training

struct EpochRow {
  int epoch = 0;
  double lr = 0, train_loss = 0, train_accuracy = 0;
  std::optional<double> val_accuracy;
  bool operator==(const EpochRow&) const = default;
};

inline void write_train_log_header(std::ostream& os) { os << "epoch,lr,train_loss,train_accuracy,val_accuracy\n"; }

inline void write_train_log_row(std::ostream& os, const EpochRow& r) {
  os << std::setprecision(17) << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.train_accuracy << ',';
  if (r.val_accuracy) os << *r.val_accuracy;
  os << '\n';
}

struct TrainResult {
  std::vector<EpochRow> log;
  fs::path final_checkpoint, best_checkpoint, log_path;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  std::optional<TransferReport> transfer;
  std::optional<Model<float>> model;
};

using EpochCallback = std::function<void(const EpochRow&)>;

namespace detail {

struct StepStats {
  double loss_sum = 0;
  std::size_t samples = 0, correct = 0, total = 0;
};

inline void check_finite(double loss, int epoch, std::size_t batch) {
  if (!std::isfinite(loss)) {
    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch));
  }
}

template <typename Opt>
void train_step(Model<float>& model, Opt& opt, const Batch<float>& b, Task task, double threshold, int epoch,
                std::size_t batch_index, StepStats& st) {
  Tape<float> tape;
  const Var x = tape.leaf(b.images);
  Var loss;
  if (task == Task::Segment) {
    const Var p = forward_segment(tape, model, x, Mode::Train);
    loss = bce_loss(tape, p, b.masks);
    const auto& probs = tape.value(p);
    for (std::size_t i = 0; i < probs.numel(); ++i) st.correct += (probs[i] >= threshold) == (b.masks[i] > 0.5f);
    st.total += probs.numel();
  } else {
    const Var p = forward_classify(tape, model, x, Mode::Train);
    loss = cce_loss(tape, p, b.labels);
    for (std::size_t n = 0; n < b.labels.size(); ++n) st.correct += argmax_row(tape.value(p), n) == b.labels[n];
    st.total += b.labels.size();
  }
  const double value = tape.value(loss)[0];
  check_finite(value, epoch, batch_index);
  model.zero_grad();
  tape.backward(loss);
  auto params = model.parameters();
  opt.step(params);
  st.loss_sum += value * double(b.images.shape().n);
  st.samples += b.images.shape().n;
}

inline double accuracy_on(Model<float>& model, const std::vector<SegRecord>& recs, double threshold) {
  std::vector<Mask> gts;
  for (const auto& r : recs) gts.push_back(to_mask(r.mask));
  return evaluate_dataset(predict_masks(model, recs, threshold), gts, Aggregation::Micro).accuracy;
}

inline double accuracy_on(Model<float>& model, const std::vector<ClsRecord>& recs, double) {
  return evaluate_classification(model, recs).accuracy;
}

template <typename Record, typename Opt>
TrainResult run_training(const RunConfig& c, Model<float>& model, Opt& opt, const DataSplits<Record>& data,
                         const EpochCallback& on_epoch) {
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  {
    std::ofstream cfg(out / "config.json");
    cfg << to_json(c).dump(2) << '\n';
    std::ofstream split_csv(out / "split.csv");
    split_csv << "id,partition\n";
    for (const auto* part : {&data.train, &data.val, &data.test}) {
      const char* name = part == &data.train ? "train" : part == &data.val ? "val" : "test";
      for (const auto& r : *part) split_csv << r.id << ',' << name << '\n';
    }
  }
  TrainResult res;
  res.n_train = data.train.size();
  res.n_val = data.val.size();
  res.n_test = data.test.size();
  res.log_path = out / "train_log.csv";
  res.final_checkpoint = out / "final.nbln";
  res.best_checkpoint = out / "best.nbln";
  std::ofstream log(res.log_path);
  if (!log) throw std::runtime_error("cannot write " + res.log_path.string());
  write_train_log_header(log);

  double best = -1;
  for (int epoch = 0; epoch < c.epochs; ++epoch) {
    EpochRow row;
    row.epoch = epoch;
    row.lr = c.lr_at(epoch);
    opt.set_lr(row.lr);
    StepStats st;
    const auto order = epoch_batches(data.train.size(), c.batch_size, c.seed, std::uint64_t(epoch));
    for (std::size_t bi = 0; bi < order.size(); ++bi) {
      const auto batch = make_batch<float>(data.train, order[bi], c.model.in_channels);
      train_step(model, opt, batch, c.task, c.threshold, epoch, bi, st);
    }
    row.train_loss = st.loss_sum / double(st.samples);
    row.train_accuracy = double(st.correct) / double(st.total);
    if (!data.val.empty()) row.val_accuracy = accuracy_on(model, data.val, c.threshold);
    res.log.push_back(row);
    write_train_log_row(log, row);
    log.flush();
    if (on_epoch) on_epoch(row);

    const double score = row.val_accuracy ? *row.val_accuracy : -row.train_loss;
    if (score > best || epoch == 0) {
      best = score;
      save_checkpoint(model, res.best_checkpoint, std::uint64_t(epoch + 1));
    }
    if ((epoch + 1) % c.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.nbln", epoch + 1);
      save_checkpoint(model, out / name, std::uint64_t(epoch + 1));
    }
  }
  save_checkpoint(model, res.final_checkpoint, std::uint64_t(c.epochs));
  return res;
}

template <typename Record>
TrainResult train_with(const RunConfig& c, Model<float>& model, const DataSplits<Record>& data,
                       const EpochCallback& on_epoch) {
  if (c.optimizer == OptimizerKind::Adam) {
    Adam<float> opt({.lr = c.lr});
    return run_training(c, model, opt, data, on_epoch);
  }
  SgdMomentum<float> opt({.lr = c.lr, .momentum = c.momentum});
  return run_training(c, model, opt, data, on_epoch);
}

}  // namespace detail

/// Full run: data (resolved before any model work), model, optional transfer,
/// epochs, CSV log and checkpoints in c.out_dir.
inline TrainResult train(const RunConfig& c, const EpochCallback& on_epoch = {}) {
  c.validate();
  std::optional<DataSplits<SegRecord>> seg;
  std::optional<DataSplits<ClsRecord>> cls;
  if (c.task == Task::Segment) seg = prepare_segmentation_data(c);
  else cls = prepare_classification_data(c);

  Model<float> model = build_model<float>(c.model);
  std::optional<TransferReport> transfer;
  if (!c.transfer_from.empty()) transfer = transfer_load(model, read_checkpoint(c.transfer_from));
  TrainResult res = seg ? detail::train_with(c, model, *seg, on_epoch) : detail::train_with(c, model, *cls, on_epoch);
  res.transfer = std::move(transfer);
  res.model.emplace(std::move(model));
  return res;
}

// ---------------------------------------------------------- contour overlay

/// Foreground pixels with at least one 4-neighbour that is background
/// (outside the raster counts as background).
inline Image contour(const Image& mask) {
  Image out(mask.width, mask.height, 1, 0);
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == mask.height || x + 1 == mask.width || !mask.at(y - 1, x) ||
                        !mask.at(y + 1, x) || !mask.at(y, x - 1) || !mask.at(y, x + 1);
      out.at(y, x) = edge ? 1 : 0;
    }
  }
  return out;
}

inline constexpr std::uint8_t kGroundTruthColor[3] = {0, 255, 0};
inline constexpr std::uint8_t kPredictionColor[3] = {0, 0, 255};

/// RGB copy of `image` with the ground-truth contour in green and the
/// prediction contour in blue drawn over it.
inline Image render_overlay(const Image& image, const Image& pred_mask, const Image* gt_mask = nullptr) {
  Image out(image.width, image.height, 3);
  for (std::size_t i = 0; i < image.width * image.height; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = image.pixels[i * image.channels + (image.channels == 1 ? 0 : c)];
  auto draw = [&](const Image& mask, const std::uint8_t* color) {
    if (mask.width != image.width || mask.height != image.height) throw ShapeError("overlay mask extents differ from image");
    const Image edge = contour(mask);
    for (std::size_t i = 0; i < edge.pixels.size(); ++i)
      if (edge.pixels[i]) std::copy_n(color, 3, out.pixels.begin() + std::ptrdiff_t(i * 3));
  };
  if (gt_mask) draw(*gt_mask, kGroundTruthColor);
  draw(pred_mask, kPredictionColor);
  return out;
}

/// Binary mask at the image's own extents: resized to the model input,
/// predicted in infer mode, thresholded, then resized back (nearest).
inline Image predict_mask(Model<float>& model, const Image& image, double threshold = 0.5) {
  const std::size_t s = model.spec().input_size;
  const Image in = resize(image, s, s, Interp::Bilinear);
  const Tensor<float> probs = forward_segment(model, image_tensor<float>(in, model.spec().in_channels), Mode::Infer);
  Image m(s, s, 1);
  m.pixels = binarize(probs.data(), threshold);
  return resize(m, image.height, image.width, Interp::Nearest);
}

inline Image mask_to_png(const Image& mask) {
  Image out = mask;
  for (auto& v : out.pixels) v = v ? 255 : 0;
  return out;
}

}  // namespace nabla
