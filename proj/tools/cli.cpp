#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sbc/binio.hpp"
#include "sbc/compressor.hpp"
#include "sbc/errors.hpp"
#include "sbc/priors.hpp"
#include "sbc/trainer.hpp"

namespace fs = std::filesystem;

namespace sbc::cli {

namespace {

// Raised for anything the user can fix: bad flags, missing files, shape mismatch.
struct BadInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataOptions {
  std::string dataset = "mnist";
  std::string dir;
  std::size_t train_subset = 0;
  std::size_t test_subset = 0;
  std::size_t synth_train = 2000;
  std::size_t synth_test = 500;
  std::size_t synth_classes = 10;
  std::size_t synth_size = 16;
};

struct Common {
  std::string config;
  std::string out = "out";
  bool quiet = false;
};

struct Options {
  Common common;
  DataOptions data;
  TrainConfig train;
  std::string optimizer = "adam";
  std::string finetune_mode = "mean";
  bool wall_time = true;
  std::string model;
  int repeats = 5;
  std::vector<double> fractions{1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01};
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key=value file; flags given on the command line win")
      ->configurable(false);
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
  sub->add_flag("--quiet", c.quiet, "progress off; stdout carries data only");
}

void add_data(CLI::App* sub, DataOptions& d) {
  sub->add_option("--dataset", d.dataset, "mnist or synth")
      ->check(CLI::IsMember({"mnist", "synth"}))
      ->capture_default_str();
  sub->add_option("--data", d.dir, "MNIST IDX directory (default: $SBC_DATA_DIR)");
  sub->add_option("--test-subset", d.test_subset, "use the first N test samples (0 = all)")->capture_default_str();
  sub->add_option("--train-subset", d.train_subset, "use the first N training samples (0 = all)")
      ->capture_default_str();
  sub->add_option("--synth-train", d.synth_train, "synthetic training samples")->capture_default_str();
  sub->add_option("--synth-test", d.synth_test, "synthetic test samples")->capture_default_str();
  sub->add_option("--synth-classes", d.synth_classes, "synthetic classes")->capture_default_str();
  sub->add_option("--synth-size", d.synth_size, "synthetic image side")->capture_default_str();
}

void add_thresholds(CLI::App* sub, PruneThresholds& t) {
  sub->add_option("--group-tau", t.group_tau, "drop groups whose score is below this")->capture_default_str();
  sub->add_option("--weight-tau", t.weight_log_alpha_tau, "drop weights with ln(sigma^2/mu^2) above this")
      ->capture_default_str();
}

void add_train(CLI::App* sub, Options& o) {
  TrainConfig& t = o.train;
  sub->add_option("--arch", t.arch, "lenet300, lenet5, synthconv[:size] or mlp:A-B-...")->capture_default_str();
  sub->add_option("--epochs", t.epochs, "variational training epochs")->capture_default_str();
  sub->add_option("--batch-size", t.batch_size, "minibatch size")->capture_default_str();
  sub->add_option("--optimizer", o.optimizer, "adam or sgd")->check(CLI::IsMember({"adam", "sgd"}))->capture_default_str();
  sub->add_option("--lr", t.learning_rate, "learning rate")->capture_default_str();
  sub->add_option("--logvar-lr-scale", t.logvar_lr_scale, "learning-rate multiplier for log-variances")
      ->capture_default_str();
  sub->add_option("--scale-lr-scale", t.scale_lr_scale, "learning-rate multiplier for the group scale means")
      ->capture_default_str();
  sub->add_option("--kl-scale-n", t.kl_scale_N, "N dividing the KL (0 = training set size)")->capture_default_str();
  sub->add_option("--lambda-cluster", t.lambda_cluster, "cluster-sparsity penalty weight")->capture_default_str();
  sub->add_option("--lambda-skew", t.lambda_skew, "block-skew penalty weight")->capture_default_str();
  sub->add_option("--seed", t.seed, "seed for init, batches and noise")->capture_default_str();
  sub->add_option("--warm-start", t.warm_start, "checkpoint whose means start the run");
  sub->add_option("--pretrain-epochs", t.pretrain_epochs, "plain epochs used as warm start (without --warm-start)")
      ->capture_default_str();
  sub->add_option("--prune-epoch", t.prune_epoch, "epoch after which to prune (0 = never)")->capture_default_str();
  sub->add_option("--finetune", t.finetune, "keep training the survivors after pruning")->capture_default_str();
  sub->add_option("--finetune-mode", o.finetune_mode, "mean or bayesian")
      ->check(CLI::IsMember({"mean", "bayesian"}))
      ->capture_default_str();
  sub->add_option("--finetune-epochs", t.finetune_epochs, "epochs after pruning")->capture_default_str();
  sub->add_option("--bayesian", t.bayesian, "false trains the plain network")->capture_default_str();
  sub->add_option("--learn-alpha", t.learn_alpha, "learn the Dirichlet parameters")->capture_default_str();
  sub->add_option("--learn-tau", t.learn_tau, "learn the horseshoe global scale")->capture_default_str();
  sub->add_option("--clip-norm", t.clip_norm, "global gradient-norm clip")->capture_default_str();
  sub->add_option("--checkpoint-every", t.checkpoint_every, "save model.sbck every N epochs (0 = end only)")
      ->capture_default_str();
  sub->add_option("--wall-time", o.wall_time, "record seconds in history.csv (false writes 0)")->capture_default_str();
  add_thresholds(sub, t.thresholds);
}

// Config file lines become `--key=value` arguments placed before the real ones.
std::vector<std::string> config_args(const CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw BadInput("--config: cannot read '" + path + "'");
  std::vector<std::string> args;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw BadInput("--config: " + path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r\"");
      const auto b = s.find_last_not_of(" \t\r\"");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (key == "config" || opt == nullptr) {
      throw BadInput("--config: " + path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (value.empty()) continue;
    if (value.front() == '[' && value.back() == ']') {
      args.push_back("--" + key);
      std::stringstream ss(value.substr(1, value.size() - 2));
      for (std::string item; std::getline(ss, item, ',');) args.push_back(trim(item));
    } else {
      args.push_back("--" + key + "=" + value);
    }
  }
  return args;
}

// Everything needed to rerun the command: key=value for every configurable option.
std::string effective_config(const CLI::App& sub) {
  std::ostringstream os;
  os << "# sbc " << sub.get_name() << "\n";
  for (const CLI::Option* opt : sub.get_options()) {
    if (!opt->get_configurable() || opt->get_lnames().empty() || opt->get_lnames()[0] == "help") continue;
    const auto results = opt->results();
    std::string value;
    if (!results.empty()) {
      if (opt->get_expected_max() > 1) {
        value = "[";
        for (std::size_t i = 0; i < results.size(); ++i) value += (i ? "," : "") + results[i];
        value += "]";
      } else {
        value = results.back();
      }
    } else {
      value = opt->get_default_str();
    }
    if (opt->get_expected_min() == 0 && value.empty()) value = "false";
    os << opt->get_lnames()[0] << "=" << value << "\n";
  }
  return os.str();
}

class Runner {
 public:
  Runner(std::ostream& out, std::ostream& err, const Common& c) : out_(out), err_(err), c_(c) {}

  // Progress and human-readable summaries; silenced by --quiet.
  std::ostream& info() { return c_.quiet ? null_ : out_; }
  std::ostream& data() { return out_; }
  std::ostream& diag() { return err_; }

  fs::path prepare_out(const std::string& config) {
    const fs::path dir(c_.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw BadInput("--out: cannot create '" + c_.out + "': " + ec.message());
    std::ofstream(dir / "config.txt") << config;
    return dir;
  }

 private:
  std::ostream& out_;
  std::ostream& err_;
  const Common& c_;
  std::ostringstream null_;
};

std::string data_dir(const DataOptions& d) {
  if (!d.dir.empty()) return d.dir;
  if (const char* env = std::getenv("SBC_DATA_DIR")) return env;
  return {};
}

Dataset load_split(const DataOptions& d, const std::string& split, std::uint64_t seed) {
  Dataset ds;
  if (d.dataset == "synth") {
    const bool train = split == "train";
    const std::size_t n = train ? d.synth_train : d.synth_test;
    ds = synth_classification(n, d.synth_classes, d.synth_size, seed * 2 + (train ? 0 : 1));
  } else {
    const std::string dir = data_dir(d);
    if (dir.empty()) throw BadInput("--data: no MNIST directory given and SBC_DATA_DIR is unset");
    if (!fs::is_directory(dir)) throw BadInput("--data: '" + dir + "' is not a directory");
    try {
      ds = load_mnist_split(dir, split);
    } catch (const std::exception& e) {
      throw BadInput(std::string("--data: ") + e.what());
    }
  }
  const std::size_t keep = split == "train" ? d.train_subset : d.test_subset;
  if (keep > 0 && keep < ds.size()) ds = ds.head(keep);
  return ds;
}

void check_fits(const Architecture& arch, const Dataset& d) {
  if (arch.input_size() != d.feature_size()) {
    throw BadInput("data has " + std::to_string(d.feature_size()) + " features per sample but architecture '" +
                   arch.name + "' expects " + std::to_string(arch.input_size()));
  }
  for (int y : d.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= arch.classes()) {
      throw BadInput("label " + std::to_string(y) + " outside the architecture's " + std::to_string(arch.classes()) +
                     " classes");
    }
}

bool is_compressed_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  return in.gcount() == 4 && std::string(magic, 4) == "SBCM";
}

Model read_checkpoint(const std::string& path, const char* flag) {
  if (path.empty()) throw BadInput(std::string(flag) + ": no model given");
  if (!fs::is_regular_file(path)) throw BadInput(std::string(flag) + ": '" + path + "' does not exist");
  try {
    return load_checkpoint(path);
  } catch (const FormatError& e) {
    throw BadInput(std::string(flag) + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

int cmd_train(Options& o, const std::string& config, Runner& r) {
  TrainConfig cfg = o.train;
  cfg.optimizer = optimizer_from_string(o.optimizer);
  cfg.finetune_mode = finetune_mode_from_string(o.finetune_mode);
  try {
    cfg.validate();
    Architecture::by_name(cfg.arch, o.data.dataset == "synth" ? o.data.synth_classes : 10).validate();
  } catch (const std::exception& e) {
    throw BadInput(e.what());
  }
  if (!cfg.warm_start.empty() && !fs::is_regular_file(cfg.warm_start)) {
    throw BadInput("--warm-start: '" + cfg.warm_start + "' does not exist");
  }
  const Dataset train_set = load_split(o.data, "train", cfg.seed);
  const Dataset test_set = load_split(o.data, "test", cfg.seed);
  check_fits(Architecture::by_name(cfg.arch, train_set.classes), train_set);
  const fs::path dir = r.prepare_out(config);
  cfg.checkpoint_path = (dir / "model.sbck").string();

  r.info() << "training " << cfg.arch << " on " << train_set.size() << " samples, testing on " << test_set.size()
           << "\n";
  auto progress = [&](const char* phase) {
    return [&r, phase](const EpochRecord& e) {
      r.info() << phase << " epoch " << e.epoch << "  loss " << e.loss << "  nll " << e.nll << "  kl " << e.kl
               << "  error% " << pct(e.test_error) << "\n";
    };
  };
  TrainResult res;
  if (cfg.pretrain_epochs > 0 && cfg.warm_start.empty() && cfg.bayesian) {
    TrainResult pre = pretrain(cfg, train_set, &test_set, progress("pretrain"));
    std::ofstream ph(dir / "pretrain_history.csv");
    pre.history.write_csv(ph, o.wall_time);
    save_checkpoint(pre.model, (dir / "pretrained.sbck").string());
    res = train(cfg, train_set, &test_set, warm_started(cfg, pre.model, train_set.classes), progress("train"));
  } else {
    res = train(cfg, train_set, &test_set, initial_model(cfg, train_set.classes), progress("train"));
  }
  {
    std::ofstream h(dir / "history.csv");
    res.history.write_csv(h, o.wall_time);
  }
  save_checkpoint(res.model, cfg.checkpoint_path);
  if (res.pre_prune) save_checkpoint(*res.pre_prune, (dir / "pre_prune.sbck").string());

  const double err = evaluate(res.model, test_set);
  r.data() << "error%," << pct(err) << "\n";
  if (res.pruning) {
    r.data() << "pruned_architecture," << format_architecture(res.pruning->units) << "\n";
    r.data() << "wr%," << pct(100.0 * static_cast<double>(res.model.kept_weight_count()) /
                                 static_cast<double>(res.model.weight_count()))
             << "\n";
  }
  r.info() << "wrote " << (dir / "history.csv").string() << " and " << cfg.checkpoint_path << "\n";
  return kExitOk;
}

int cmd_compress(Options& o, const std::string& config, Runner& r) {
  const Model model = read_checkpoint(o.model, "--model");
  std::optional<Dataset> test;
  const bool have_data = o.data.dataset == "synth" || !data_dir(o.data).empty();
  if (have_data) {
    test = load_split(o.data, "test", o.train.seed);
    check_fits(model.arch, *test);
  }
  const fs::path dir = r.prepare_out(config);

  PruneResult pr;
  try {
    pr = prune(model, o.train.thresholds);
  } catch (const PruneError& e) {
    r.diag() << "error: " << e.what() << "\n";
    r.diag() << "layer,kept_weights,total_weights\n";
    for (std::size_t l = 0; l < e.survivors().size(); ++l)
      r.diag() << l << "," << e.survivors()[l] << "," << model.layers[l].w_mu.size() << "\n";
    return kExitEmptyLayer;
  }
  const auto bits = assign_bits(pr.model);
  const auto bytes = export_compressed(pr.model, bits);
  binio::write_file((dir / "model.sbcm").string(), bytes);
  const CompressedModel c = decode_compressed(bytes);
  CompressionReport rep = compression_metrics(model, c);
  if (test) {
    rep.error_before = evaluate(model, *test);
    rep.error_after = evaluate(pr.model, *test);
    const auto labels = sparse_predict_labels(c, test->images);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) wrong += labels[i] != test->labels[i];
    rep.error_quantized = 100.0 * static_cast<double>(wrong) / static_cast<double>(labels.size());
  }
  {
    std::ofstream csv(dir / "report.csv");
    write_report_csv(csv, rep);
  }
  write_text(dir / "report.json", report_json(rep) + "\n");

  r.data() << "pruned_architecture," << format_architecture(rep.units) << "\n";
  r.data() << "wr%," << pct(rep.wr) << "\n";
  r.data() << "cr," << pct(rep.cr) << "\n";
  r.data() << "average_bits," << pct(rep.average_bits) << "\n";
  if (test) {
    r.data() << "error_before%," << pct(rep.error_before) << "\n";
    r.data() << "error_after%," << pct(rep.error_after) << "\n";
    r.data() << "error_quantized%," << pct(rep.error_quantized) << "\n";
  }
  r.info() << "wrote model.sbcm (" << bytes.size() << " bytes), report.csv, report.json to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_eval(Options& o, const std::string& config, Runner& r) {
  if (o.model.empty()) throw BadInput("--model: no model given");
  if (!fs::is_regular_file(o.model)) throw BadInput("--model: '" + o.model + "' does not exist");
  const Dataset test = load_split(o.data, "test", o.train.seed);
  r.prepare_out(config);
  if (is_compressed_file(o.model)) {
    CompressedModel c;
    try {
      c = import_compressed(o.model);
    } catch (const FormatError& e) {
      throw BadInput(std::string("--model: ") + e.what());
    }
    check_fits(c.arch, test);
    const auto labels = sparse_predict_labels(c, test.images);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) wrong += labels[i] != test.labels[i];
    r.data() << "error%," << pct(100.0 * static_cast<double>(wrong) / static_cast<double>(test.size())) << "\n";
    const TimingReport t = time_inference(c, test.images, o.repeats);
    std::ostringstream os;
    os << std::setprecision(6);
    os << "dense_seconds," << t.dense_seconds << "\nsparse_seconds," << t.sparse_seconds << "\nspeedup,"
       << t.speedup() << "\n";
    r.data() << os.str();
  } else {
    const Model m = read_checkpoint(o.model, "--model");
    check_fits(m.arch, test);
    r.data() << "error%," << pct(evaluate(m, test)) << "\n";
  }
  return kExitOk;
}

int cmd_sweep(Options& o, const std::string& config, Runner& r) {
  if (o.fractions.empty()) throw BadInput("--fractions: empty grid");
  for (double f : o.fractions)
    if (!(f > 0.0 && f <= 1.0)) throw BadInput("--fractions: " + std::to_string(f) + " is outside (0, 1]");
  const Model m = read_checkpoint(o.model, "--model");
  const Dataset test = load_split(o.data, "test", o.train.seed);
  check_fits(m.arch, test);
  const fs::path dir = r.prepare_out(config);
  const auto curve = sweep_curve(m, thresholds_for_fractions(m, o.fractions), test);
  std::ostringstream os;
  write_curve_csv(os, curve);
  write_text(dir / "curve.csv", os.str());
  r.data() << os.str();
  return kExitOk;
}

int cmd_priors(Options&, const std::string& config, Runner& r) {
  const fs::path dir = r.prepare_out(config);
  std::ostringstream os;
  write_density_profile(os, priors::profiled_components(), priors::profile_grid());
  write_text(dir / "priors.csv", os.str());
  r.info() << "wrote " << (dir / "priors.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Structured Bayesian compression: train, prune, quantize and benchmark small networks", "sbc"};
  app.require_subcommand(1, 1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  auto* train_cmd = app.add_subcommand("train", "train a network under the sparsity priors");
  add_common(train_cmd, o.common);
  add_data(train_cmd, o.data);
  add_train(train_cmd, o);

  auto* compress_cmd = app.add_subcommand("compress", "prune, quantize and export a checkpoint");
  add_common(compress_cmd, o.common);
  compress_cmd->add_option("--model", o.model, "checkpoint (.sbck)");
  add_data(compress_cmd, o.data);
  add_thresholds(compress_cmd, o.train.thresholds);

  auto* eval_cmd = app.add_subcommand("eval", "test error of a checkpoint or compressed model");
  add_common(eval_cmd, o.common);
  eval_cmd->add_option("--model", o.model, "checkpoint (.sbck) or compressed model (.sbcm)");
  add_data(eval_cmd, o.data);
  eval_cmd->add_option("--repeats", o.repeats, "timing repeats for compressed models")->capture_default_str();

  auto* sweep_cmd = app.add_subcommand("sweep", "error against kept fraction of weights");
  add_common(sweep_cmd, o.common);
  sweep_cmd->add_option("--model", o.model, "checkpoint (.sbck)");
  add_data(sweep_cmd, o.data);
  sweep_cmd->add_option("--fractions", o.fractions, "kept fractions, e.g. 1,0.5,0.05")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->capture_default_str();

  auto* priors_cmd = app.add_subcommand("priors", "log-density profiles of the prior components");
  add_common(priors_cmd, o.common);

  for (auto* sub : {compress_cmd, eval_cmd, sweep_cmd})
    sub->add_option("--seed", o.train.seed, "seed for synthetic data")->capture_default_str();

  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);

  auto report_parse = [&](const CLI::ParseError& e) {
    std::ostringstream o_, e_;
    const int rc = app.exit(e, o_, e_);
    out << o_.str();
    err << e_.str();
    return rc == 0 ? kExitOk : kExitBadInput;
  };

  try {
    // First pass finds the subcommand and --config; the second applies the file
    // ahead of the command line so explicit flags win.
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
    CLI::App* sub = app.get_subcommands().front();
    if (!o.common.config.empty()) {
      const std::string cfg_path = o.common.config;
      std::vector<std::string> merged;
      merged.push_back(sub->get_name());
      for (auto& a : config_args(*sub, cfg_path)) merged.push_back(a);
      for (std::size_t i = 0; i < args.size(); ++i)
        if (args[i] != sub->get_name() || i != 0) merged.push_back(args[i]);
      o = Options{};
      app.clear();
      std::vector<std::string> mrev(merged.rbegin(), merged.rend());
      app.parse(mrev);
    }
  } catch (const CLI::ParseError& e) {
    return report_parse(e);
  } catch (const BadInput& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  }

  CLI::App* sub = app.get_subcommands().front();
  Runner runner(out, err, o.common);
  try {
    const std::string config = effective_config(*sub);
    if (sub == train_cmd) return cmd_train(o, config, runner);
    if (sub == compress_cmd) return cmd_compress(o, config, runner);
    if (sub == eval_cmd) return cmd_eval(o, config, runner);
    if (sub == sweep_cmd) return cmd_sweep(o, config, runner);
    return cmd_priors(o, config, runner);
  } catch (const BadInput& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const PruneError& e) {
    err << "error: " << e.what() << "\n";
    return kExitEmptyLayer;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace sbc::cli
