// Command-line front end: train / evaluate / predict / inspect / synth.
// Failures print exactly one line, "error: <kind>: <message>", to stderr.

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nabla/checkpoint.hpp"
#include "nabla/data.hpp"
#include "nabla/image.hpp"
#include "nabla/train.hpp"

namespace fs = std::filesystem;
using namespace nabla;

namespace {

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const std::string& kind, const std::string& message, int code = 1) {
  std::cerr << "error: " << kind << ": " << one_line(message) << std::endl;
  return code;
}

void print_model(std::ostream& os, const Model<float>& model) {
  os << "spec: " << nlohmann::json(model.spec()).dump() << '\n';
  if (model.spec().family == Family::Nabla) os << "topology: " << model.topology().describe() << '\n';
  os << "parameters: " << count_params(model) << '\n';
  os << "count_assumptions: conv weights+biases, batchnorm gamma/beta; running statistics excluded; "
        "recurrent kernels shared across all t steps\n";
  os << "tensors: " << model.store().size() << '\n';
  os << "layer,kind,shape,numel\n";
  for (const auto& e : model.store().entries()) {
    os << e.name << ',' << (e.kind == TensorKind::Param ? "param" : "buffer") << ',' << e.tensor.shape().str() << ','
       << e.tensor.numel() << '\n';
  }
}

void print_recipe(std::ostream& os, const RunConfig& c) {
  os << "task: " << to_string(c.task) << '\n';
  os << "loss: " << c.loss() << '\n';
  os << "optimizer: " << to_string(c.optimizer) << '\n';
  os << "lr: " << c.lr << '\n';
  if (c.optimizer == OptimizerKind::Sgd) os << "momentum: " << c.momentum << '\n';
  os << "epochs: " << c.epochs << '\n';
  os << "batch_size: " << c.batch_size << '\n';
  os << "lr_schedule: " << to_string(c.lr_schedule);
  if (c.lr_schedule == Schedule::Step) os << " (divide by " << c.lr_step_factor << " every " << c.lr_step_period << " epochs)";
  os << '\n';
  os << "lr_decay_epochs: ";
  const auto decay = c.lr_decay_epochs();
  if (decay.empty()) os << "none";
  for (std::size_t i = 0; i < decay.size(); ++i) os << (i ? "," : "") << decay[i];
  os << '\n';
  os << "augment: " << (c.augment ? "flips" : "none") << '\n';
  os << "config: " << to_json(c).dump() << '\n';
}

int cmd_train(const std::string& config, const std::vector<std::string>& overrides) {
  const RunConfig c = load_run_config(config, overrides);
  const TrainResult r = train(c, [](const EpochRow& row) {
    std::cerr << "epoch " << row.epoch << " lr " << row.lr << " loss " << row.train_loss << " train_acc "
              << row.train_accuracy;
    if (row.val_accuracy) std::cerr << " val_acc " << *row.val_accuracy;
    std::cerr << std::endl;
  });
  if (r.transfer) {
    std::cout << "transfer_loaded: " << r.transfer->loaded.size() << '\n';
    std::cout << "transfer_skipped: " << r.transfer->skipped.size() << '\n';
    for (const auto& [name, why] : r.transfer->skipped) std::cout << "  skipped " << name << " (" << why << ")\n";
    if (!r.transfer->warning.empty()) std::cout << "transfer_warning: " << r.transfer->warning << '\n';
  }
  std::cout << "records: train " << r.n_train << " val " << r.n_val << " test " << r.n_test << '\n';
  std::cout << "log: " << r.log_path.string() << '\n';
  std::cout << "best_checkpoint: " << r.best_checkpoint.string() << '\n';
  std::cout << "final_checkpoint: " << r.final_checkpoint.string() << '\n';
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data, const std::string& out, double threshold) {
  Model<float> model = load_checkpoint<float>(checkpoint);
  const EvalResult r = evaluate(model, data, threshold);
  r.write_csv(std::cout);
  if (!out.empty()) {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    r.write_csv(f);
  }
  return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& image_path, const std::string& gt_path,
                const std::string& out, double threshold) {
  Model<float> model = load_checkpoint<float>(checkpoint);
  const Image image = read_image(image_path);
  fs::create_directories(out);
  const std::string stem = fs::path(image_path).stem().string();
  if (model.spec().family == Family::Irrcnn) {
    const std::size_t s = model.spec().input_size;
    const Tensor<float> probs = forward_classify(
        model, image_tensor<float>(resize(image, s, s, Interp::Bilinear), model.spec().in_channels), Mode::Infer);
    const fs::path csv = fs::path(out) / (stem + "_probs.csv");
    std::ofstream f(csv);
    f << "class,probability\n";
    for (std::size_t k = 0; k < probs.numel(); ++k) f << k << ',' << probs[k] << '\n';
    const int label = argmax_row(probs, 0);
    std::cout << "label: " << label << '\n' << "probs: " << csv.string() << '\n';
    return 0;
  }
  const Image mask = predict_mask(model, image, threshold);
  std::optional<Image> gt;
  if (!gt_path.empty()) {
    gt = binarize_mask(read_image(gt_path));
    if (gt->width != image.width || gt->height != image.height) gt = resize(*gt, image.height, image.width, Interp::Nearest);
  }
  const fs::path mask_path = fs::path(out) / (stem + "_mask.png");
  const fs::path overlay_path = fs::path(out) / (stem + "_overlay.png");
  write_png(mask_path, mask_to_png(mask));
  write_png(overlay_path, render_overlay(image, mask, gt ? &*gt : nullptr));
  std::cout << "mask: " << mask_path.string() << '\n' << "overlay: " << overlay_path.string() << '\n';
  if (gt) {
    const auto m = compute_metrics(confusion_counts(to_mask(mask), to_mask(*gt)));
    std::cout << "dice: " << m.dice << '\n' << "iou: " << m.iou << '\n';
  }
  return 0;
}

int cmd_inspect(const std::string& checkpoint, const std::string& config, const std::vector<std::string>& overrides) {
  if (!checkpoint.empty()) {
    const Checkpoint c = read_checkpoint(checkpoint);
    std::cout << "format_version: " << c.version << '\n' << "epoch: " << c.epoch << '\n';
    print_model(std::cout, model_from_checkpoint<float>(c));
    return 0;
  }
  const RunConfig c = load_run_config(config, overrides);
  print_recipe(std::cout, c);
  print_model(std::cout, build_model<float>(c.model));
  return 0;
}

int cmd_synth(const std::string& out, std::size_t n, std::size_t size, std::uint64_t seed, std::size_t classes) {
  if (classes == 0) {
    save_segmentation_dataset(out, synth_lesions(n, size, size, seed).records);
    std::cout << "segmentation: " << n << " records " << size << "x" << size << " in " << out << '\n';
  } else {
    save_classification_dataset(out, synth_lesion_classes(n, size, size, classes, seed));
    std::cout << "classification: " << n << " records " << size << "x" << size << " " << classes << " classes in "
              << out << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nabla-N segmentation / IRRCNN classification toolkit"};
  app.require_subcommand(1);

  std::string config, checkpoint, data, image, gt, out;
  std::vector<std::string> overrides;
  double threshold = 0.5;
  std::size_t n = 8, size = 32, classes = 0;
  std::uint64_t seed = 0;

  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON run config");
  train_cmd->add_option("--config", config, "run config (JSON)")->required();
  train_cmd->add_option("--override", overrides, "key=value, dotted keys for nested fields")->take_all();

  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a dataset directory");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--data", data, "directory with images/ and masks/ or labels.csv")->required();
  eval_cmd->add_option("--out", out, "also write the CSV report here");
  eval_cmd->add_option("--threshold", threshold);

  auto* predict_cmd = app.add_subcommand("predict", "mask + contour overlay for one image");
  predict_cmd->add_option("--checkpoint", checkpoint)->required();
  predict_cmd->add_option("--image", image)->required();
  predict_cmd->add_option("--gt", gt, "ground-truth mask for the overlay");
  predict_cmd->add_option("--out", out)->required();
  predict_cmd->add_option("--threshold", threshold);

  auto* inspect_cmd = app.add_subcommand("inspect", "print spec, parameter count and per-layer shapes");
  auto* ck = inspect_cmd->add_option("--checkpoint", checkpoint);
  auto* cf = inspect_cmd->add_option("--config", config);
  inspect_cmd->add_option("--override", overrides)->take_all();
  ck->excludes(cf);
  cf->excludes(ck);

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic lesion dataset");
  synth_cmd->add_option("--out", out)->required();
  synth_cmd->add_option("--n", n)->required()->check(CLI::PositiveNumber);
  synth_cmd->add_option("--size", size)->required()->check(CLI::Range(8, 4096));
  synth_cmd->add_option("--seed", seed)->required();
  synth_cmd->add_option("--classes", classes, "0 = segmentation masks, K = K-class labels")->check(CLI::Range(0, 7));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }
  if (inspect_cmd->parsed() && checkpoint.empty() == config.empty()) {
    return fail("usage", "inspect needs exactly one of --checkpoint or --config", 2);
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config, overrides);
    if (eval_cmd->parsed()) return cmd_evaluate(checkpoint, data, out, threshold);
    if (predict_cmd->parsed()) return cmd_predict(checkpoint, image, gt, out, threshold);
    if (inspect_cmd->parsed()) return cmd_inspect(checkpoint, config, overrides);
    if (synth_cmd->parsed()) return cmd_synth(out, n, size, seed, classes);
  } catch (const CheckpointError& e) {
    return fail(std::string("checkpoint.") + to_string(e.kind()), e.what());
  } catch (const ConfigError& e) {
    return fail("config", e.what());
  } catch (const DataError& e) {
    return fail("data", e.what());
  } catch (const ImageError& e) {
    return fail("image", e.what());
  } catch (const TrainingError& e) {
    return fail("training", e.what());
  } catch (const ShapeError& e) {
    return fail("shape", e.what());
  } catch (const std::invalid_argument& e) {
    return fail("invalid", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return fail("usage", "no subcommand", 2);
}
