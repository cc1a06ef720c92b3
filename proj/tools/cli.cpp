// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>

#include "cnxt/analysis.hpp"
#include "cnxt/checkpoint.hpp"
#include "cnxt/error.hpp"
#include "cnxt/parallel.hpp"
#include "cnxt/training.hpp"

namespace cnxt::cli {
namespace {

constexpr std::array<std::string_view, 8> kDataKeys{
    "data.dataset",    "data.dir",   "data.train_count", "data.eval_count",
    "data.synthetic_kind", "data.noise", "data.seed",        "data.standardize"};

struct Options {
  std::string config;
  std::string dataset;
  std::string data_dir;
  std::string checkpoint;
  std::string out;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;
  std::optional<std::size_t> topk;
  std::vector<std::string> overrides;
  std::string image;
  std::string labels;
  std::string baseline;
  std::string format = "text";
  std::string log;
};

ConfigFile resolve_config(const Options& o) {
  ConfigFile cfg = o.config.empty() ? ConfigFile{} : ConfigFile::load(o.config);
  for (const auto& s : o.overrides) cfg.apply_override(s);
  if (!o.dataset.empty()) cfg.set("data.dataset", o.dataset);
  if (!o.data_dir.empty()) cfg.set("data.dir", o.data_dir);
  if (o.epochs) cfg.set("train.epochs", std::to_string(*o.epochs));
  if (o.batch_size) cfg.set("train.batch_size", std::to_string(*o.batch_size));
  if (o.seed) cfg.set("train.seed", std::to_string(*o.seed));
  cfg.require_known(known_keys());
  return cfg;
}

const std::string& require(const std::string& value, const char* flag, const char* command) {
  if (value.empty()) {
    throw UsageError(std::string(command) + " requires " + flag);
  }
  return value;
}

NetworkGraph load_network(const Options& o, const char* command) {
  return restore(load_checkpoint(require(o.checkpoint, "--checkpoint", command)));
}

Dataset dataset_for(const DataSettings& ds, bool held_out, const ArchConfig& a) {
  return load_dataset(ds, held_out, a.num_classes, a.in_channels, a.height, a.width);
}

std::string fmt_line(const char* format, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

int cmd_train(const Options& o, std::ostream& out) {
  const ConfigFile cfg = resolve_config(o);
  const TrainConfig tc = TrainConfig::from_config(cfg);
  const DataSettings ds = DataSettings::from_config(cfg);
  NetworkGraph g;
  if (!o.checkpoint.empty()) {
    g = load_network(o, "train");
  } else {
    g = build(ArchConfig::from_config(cfg));
    init_params(g, tc.seed);
  }
  const Dataset data = dataset_for(ds, false, g.config);
  const Dataset held = dataset_for(ds, true, g.config);
  for (const auto& w : data.warnings) out << "warning: " << w << '\n';

  const std::string ckpt_path = o.out.empty() ? "model.cnxt" : o.out;
  const std::string log_path = o.log.empty() ? ckpt_path + ".log" : o.log;
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot write metric log " + log_path);
  log << metrics_header() << '\n';
  out << metrics_header() << '\n';

  TrainHooks hooks;
  hooks.eval_set = held.empty() ? nullptr : &held;
  hooks.on_epoch = [&](const EpochMetrics& m) {
    const std::string line = format_metrics(m);
    log << line << '\n';
    log.flush();
    out << line << '\n';
  };
  const TrainState state = train(g, data, tc, hooks);
  if (!log) throw IoError("failed writing metric log " + log_path);
  save_checkpoint(make_checkpoint(g, {state.epoch, tc.seed, false}), ckpt_path);
  out << "checkpoint " << ckpt_path << '\n' << "log " << log_path << '\n';
  return kOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const DataSettings ds = DataSettings::from_config(resolve_config(o));
  const NetworkGraph g = load_network(o, "eval");
  const Dataset data = dataset_for(ds, true, g.config);
  const EvalResult r = evaluate(g, data, 256, o.topk);
  out << fmt_line("top1_error %.6f\n", r.top1_error);
  out << fmt_line("top%zu_error %.6f\n", r.k, r.topk_error);
  out << fmt_line("samples %zu\n", r.count);
  return kOk;
}

int cmd_predict(const Options& o, std::ostream& out) {
  const DataSettings ds = DataSettings::from_config(resolve_config(o));
  const NetworkGraph g = load_network(o, "predict");
  const ArchConfig& a = g.config;
  Tensor4 image = read_ppm(require(o.image, "--image", "predict"));
  if (image.shape().h() != a.height || image.shape().w() != a.width) {
    image = resize_nearest(image, a.height, a.width);
  }
  if (const ChannelStats* stats = input_stats(ds)) image = standardize(image, *stats);

  std::vector<std::string> names;
  if (!o.labels.empty()) {
    names = read_label_file(o.labels);
  } else if (ds.dataset == "cifar10" && a.num_classes == 10) {
    names = cifar10_class_names();
  } else {
    for (std::size_t c = 0; c < a.num_classes; ++c) names.push_back("class" + std::to_string(c));
  }
  if (names.size() != a.num_classes) {
    throw ConfigError("label file lists " + std::to_string(names.size()) + " classes, network predicts " +
                      std::to_string(a.num_classes));
  }
  const std::size_t k = o.topk.value_or(std::min<std::size_t>(5, a.num_classes));
  if (k == 0 || k > a.num_classes) {
    throw UsageError("--topk " + std::to_string(k) + " outside [1, " + std::to_string(a.num_classes) + "]");
  }
  const Tensor4 probs = forward(g, image);
  const auto ranked = top_k(probs.values(), k);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    out << fmt_line("%zu %s %.6f\n", r + 1, names[ranked[r]].c_str(),
                    static_cast<double>(probs[ranked[r]]));
  }
  return kOk;
}

int cmd_prune(const Options& o, std::ostream& out) {
  resolve_config(o);
  const Checkpoint in = load_checkpoint(require(o.checkpoint, "--checkpoint", "prune"));
  NetworkGraph g = restore(in);
  if (g.compacted) throw UsageError(o.checkpoint + " is already compacted");
  g.set_masks(final_masks(g));
  save_checkpoint(make_checkpoint(g, in.meta), require(o.out, "--out", "prune"));
  out << "pruned_slots " << g.pruned_total() << '\n' << "checkpoint " << o.out << '\n';
  return kOk;
}

int cmd_export(const Options& o, std::ostream& out) {
  resolve_config(o);
  const Checkpoint in = load_checkpoint(require(o.checkpoint, "--checkpoint", "export"));
  const NetworkGraph g = restore(in);
  const NetworkGraph c = compact_graph(g);
  save_checkpoint(make_checkpoint(c, in.meta), require(o.out, "--out", "export"));
  out << "params " << g.params.trainable_count() << " -> " << c.params.trainable_count() << '\n'
      << "checkpoint " << o.out << '\n';
  return kOk;
}

ArchConfig baseline_arch(const std::string& ref) {
  if (std::filesystem::is_regular_file(ref)) {
    const ConfigFile cfg = ConfigFile::load(ref);
    cfg.require_known(known_keys());
    return ArchConfig::from_config(cfg);
  }
  return ArchConfig::preset(ref);
}

int cmd_analyze(const Options& o, std::ostream& out) {
  const ConfigFile cfg = resolve_config(o);
  CostReport report = o.checkpoint.empty() ? projected_cost(ArchConfig::from_config(cfg))
                                           : count_graph(load_network(o, "analyze"));
  if (!o.baseline.empty()) report = with_comparison(report, projected_cost(baseline_arch(o.baseline)));
  if (o.format == "records") {
    out << format_records(report);
  } else {
    out << format_text(report);
  }
  return kOk;
}

}  // namespace

DataSettings DataSettings::from_config(const ConfigFile& cfg) {
  DataSettings d;
  d.dataset = cfg.text("data.dataset", d.dataset);
  if (d.dataset != "cifar10" && d.dataset != "cifar100" && d.dataset != "synthetic" &&
      d.dataset != "folder") {
    throw ConfigError("data.dataset must be cifar10, cifar100, synthetic or folder, got `" + d.dataset +
                      "`");
  }
  if (d.dataset == "cifar100") d.dir = "data/cifar-100-binary";
  d.dir = cfg.text("data.dir", d.dir.string());
  d.train_count = cfg.count("data.train_count", d.train_count);
  d.eval_count = cfg.count("data.eval_count", d.eval_count);
  if (const auto k = cfg.get("data.synthetic_kind")) d.synthetic_kind = parse_synthetic_kind(*k);
  d.noise = cfg.real("data.noise", d.noise);
  d.seed = cfg.count("data.seed", d.seed);
  d.standardize = cfg.flag("data.standardize", d.standardize);
  return d;
}

std::span<const std::string_view> DataSettings::known_keys() { return kDataKeys; }

std::vector<std::string_view> known_keys() {
  std::vector<std::string_view> keys;
  for (auto group : {ArchConfig::known_keys(), TrainConfig::known_keys(), DataSettings::known_keys()}) {
    keys.insert(keys.end(), group.begin(), group.end());
  }
  return keys;
}

const ChannelStats* input_stats(const DataSettings& settings) {
  static const ChannelStats c10 = cifar10_stats();
  static const ChannelStats c100 = cifar100_stats();
  if (settings.dataset == "synthetic" || !settings.standardize) return nullptr;
  return settings.dataset == "cifar100" ? &c100 : &c10;
}

Dataset load_dataset(const DataSettings& settings, bool held_out, std::size_t classes,
                     std::size_t channels, std::size_t height, std::size_t width) {
  const std::size_t wanted = held_out ? settings.eval_count : settings.train_count;
  if (settings.dataset == "synthetic") {
    SyntheticSpec s;
    s.kind = settings.synthetic_kind;
    s.count = wanted != 0 ? wanted : (held_out ? 1000 : 5000);
    s.classes = classes;
    s.channels = channels;
    s.height = height;
    s.width = width;
    s.noise = settings.noise;
    s.seed = settings.seed;
    s.stream = held_out ? 1 : 0;
    return synthetic_dataset(s);
  }
  Dataset d;
  if (settings.dataset == "folder") {
    const auto sub = settings.dir / (held_out ? "test" : "train");
    d = load_folder(std::filesystem::is_directory(sub) ? sub : settings.dir, height, width,
                    input_stats(settings));
  } else {
    const auto variant = settings.dataset == "cifar100" ? CifarVariant::kCifar100 : CifarVariant::kCifar10;
    if (channels != 3 || height != 32 || width != 32) {
      throw ConfigError(settings.dataset + " images are 3x32x32; set arch.in_channels, arch.height and "
                        "arch.width accordingly");
    }
    d = load_cifar(settings.dir, held_out ? Split::kTest : Split::kTrain, variant, settings.standardize);
  }
  if (d.num_classes() != classes) {
    throw ConfigError(settings.dataset + " data has " + std::to_string(d.num_classes()) +
                      " classes but arch.num_classes = " + std::to_string(classes));
  }
  if (wanted != 0 && wanted < d.size()) {
    Dataset head = d.subset(0, wanted);
    head.class_names = d.class_names;
    head.warnings = d.warnings;
    return head;
  }
  return d;
}

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"CondenseNeXt training, pruning and cost analysis", "cnxt"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "Config file with [arch], [train] and [data] sections");
  app.add_option("--dataset", o.dataset, "Dataset to use")
      ->check(CLI::IsMember({"cifar10", "cifar100", "synthetic", "folder"}));
  app.add_option("--data-dir", o.data_dir, "Directory holding the dataset files");
  app.add_option("--checkpoint", o.checkpoint, "Input checkpoint");
  app.add_option("--out", o.out, "Output checkpoint path");
  app.add_option("--epochs", o.epochs, "Training epochs (train.epochs)");
  app.add_option("--batch-size", o.batch_size, "Mini-batch size (train.batch_size)");
  app.add_option("--seed", o.seed, "Initialization and sampling seed (train.seed)");
  app.add_option("--threads", o.threads, "Worker thread cap, 0 for the runtime default");
  app.add_option("--topk", o.topk, "Number of ranked classes for eval and predict");
  app.add_option("--set", o.overrides, "Config override section.key=value, repeatable")
      ->expected(1)
      ->take_all();
  app.add_option("--image", o.image, "Binary PPM image for predict");
  app.add_option("--labels", o.labels, "Label-index file for predict");
  app.add_option("--baseline", o.baseline, "Baseline config file or preset name for analyze");
  app.add_option("--format", o.format, "Analyze output format")->check(CLI::IsMember({"text", "records"}));
  app.add_option("--log", o.log, "Metric log path for train (default <out>.log)");

  auto* train_cmd = app.add_subcommand("train", "Train a network and write a checkpoint and metric log");
  auto* eval_cmd = app.add_subcommand("eval", "Report top-1 and top-k error on the evaluation split");
  auto* predict_cmd = app.add_subcommand("predict", "Rank the classes of one image");
  auto* prune_cmd = app.add_subcommand("prune", "Apply the final prune masks to a checkpoint");
  auto* analyze_cmd = app.add_subcommand("analyze", "Count FLOPs and parameters");
  auto* export_cmd = app.add_subcommand("export", "Write a checkpoint with pruned slots removed");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kConfigFailure;
  }

  try {
    set_num_threads(o.threads);
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (eval_cmd->parsed()) return cmd_eval(o, out);
    if (predict_cmd->parsed()) return cmd_predict(o, out);
    if (prune_cmd->parsed()) return cmd_prune(o, out);
    if (analyze_cmd->parsed()) return cmd_analyze(o, out);
    if (export_cmd->parsed()) return cmd_export(o, out);
    return kFailure;
  } catch (const ConfigError& e) {
    err << "cnxt: config error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const UsageError& e) {
    err << "cnxt: usage error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const IoError& e) {
    err << "cnxt: io error: " << e.what() << '\n';
    return kIoFailure;
  } catch (const FormatError& e) {
    err << "cnxt: format error: " << e.what() << '\n';
    return kIoFailure;
  } catch (const NumericError& e) {
    err << "cnxt: numeric error: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const std::exception& e) {
    err << "cnxt: error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace cnxt::cli
