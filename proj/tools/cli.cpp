#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "qart/calib.hpp"
#include "qart/checkpoint.hpp"
#include "qart/config.hpp"
#include "qart/errors.hpp"
#include "qart/metrics.hpp"
#include "qart/synthetic.hpp"

namespace qart::cli {

namespace fs = std::filesystem;
using io::RunConfig;
using model::ToyOSDSR;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> bits;
  std::optional<int> timestep;
  std::vector<int> t_list;
  std::string method = "qartsr";
  std::string checkpoint;
  std::string reference;
  std::string tag;
  std::optional<std::size_t> stage_steps, et_steps, epochs, size;
};

RunConfig resolve(const Options& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : RunConfig::load(o.config_path);
  if (const char* env = std::getenv("QART_OUT"); env != nullptr && *env != '\0') cfg.out_dir = env;
  if (o.out) cfg.out_dir = *o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (o.bits) cfg.bits = calib::BitWidth::parse(*o.bits);
  if (!o.t_list.empty()) cfg.timesteps = o.t_list;
  if (o.stage_steps) cfg.stage_steps = *o.stage_steps;
  if (o.et_steps) cfg.et_steps = *o.et_steps;
  if (o.epochs) cfg.backbone_epochs = *o.epochs;
  if (o.size) cfg.synthetic_size = *o.size;
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

fs::path prepare_out(const RunConfig& cfg, const std::string& command) {
  const fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  write_text(dir / (command + ".config.json"), cfg.to_json().dump(2) + "\n");
  return dir;
}

Dataset train_set(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return io::load_dataset(cfg.data_dir);
  return io::make_synthetic_set({cfg.synthetic_size, cfg.hr_size, cfg.seed, 0.02});
}

Dataset eval_set(const RunConfig& cfg) { return io::make_synthetic_set({cfg.eval_size, cfg.hr_size, cfg.eval_seed, 0.02}); }

void log_line(const std::string& msg) { std::cout << msg << std::endl; }

ToyOSDSR train_new(const RunConfig& cfg, const Dataset& data, int t, const fs::path& out) {
  ToyOSDSR m = ToyOSDSR::create(cfg.model_config());
  const auto log = model::train_backbone(m, data, t, cfg.train_options());
  std::ostringstream csv;
  csv.precision(12);
  csv << "step,loss\n";
  for (std::size_t i = 0; i < log.losses.size(); ++i) csv << i << ',' << log.losses[i] << '\n';
  const std::string stem = "backbone_t" + std::to_string(t);
  write_text(out / (stem + "_loss.csv"), csv.str());
  io::save_checkpoint(out / (stem + ".ckpt"), m.state());
  log_line("trained backbone at t=" + std::to_string(t) + " (" + std::to_string(log.losses.size()) +
           " steps, final loss " + std::to_string(log.losses.empty() ? 0.0 : log.losses.back()) + ")");
  return m;
}

ToyOSDSR load_model(const std::string& path) { return ToyOSDSR::from_state(io::load_checkpoint(path)); }

ToyOSDSR original_backbone(const Options& o, const RunConfig& cfg, const Dataset& data, const fs::path& out) {
  if (!o.checkpoint.empty()) {
    ToyOSDSR m = load_model(o.checkpoint);
    m.remove_quantizers();
    return m;
  }
  return train_new(cfg, data, cfg.original_timestep, out);
}

calib::TrqOptions trq_options(const RunConfig& cfg) {
  calib::TrqOptions t;
  t.train = cfg.train_options();
  return t;
}

std::string csv_reports(const std::vector<metrics::MetricReport>& rows) {
  std::string s = metrics::MetricReport::csv_header() + "\n";
  for (const auto& r : rows) s += r.csv_row() + "\n";
  return s;
}

std::string bits_stem(const calib::BitWidth& b) {
  return "w" + std::to_string(b.weight) + "a" + std::to_string(b.activation);
}

int cmd_gen_data(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out = prepare_out(cfg, "gen-data");
  const auto rows = io::build_calibration_set({cfg.synthetic_size, cfg.hr_size, cfg.seed, 0.02}, out / "data");
  log_line("wrote " + std::to_string(rows.size()) + " pairs to " + (out / "data").string());
  return kExitOk;
}

int cmd_train_backbone(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out = prepare_out(cfg, "train-backbone");
  train_new(cfg, train_set(cfg), o.timestep.value_or(cfg.original_timestep), out);
  return kExitOk;
}

int cmd_sweep(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out = prepare_out(cfg, "sweep-timestep");
  const Dataset data = train_set(cfg);
  const ToyOSDSR fp = original_backbone(o, cfg, data, out);
  const Dataset probes = eval_set(cfg);
  const auto profile = calib::sweep_timesteps(fp, data, probes, cfg.timesteps, cfg.bits, cfg.calibration_images);
  write_text(out / "timestep_profile.csv", profile.to_csv());
  std::cout << profile.to_csv();
  return kExitOk;
}

void save_stage_log(const fs::path& path, const calib::PipelineLog& log) { write_text(path, log.to_csv()); }

int cmd_quantize(const Options& o) {
  const RunConfig cfg = resolve(o);
  if (o.method != "maxmin" && o.method != "qartsr") throw ConfigError("unknown method '" + o.method + "'");
  const fs::path out = prepare_out(cfg, "quantize");
  const Dataset data = train_set(cfg);
  const ToyOSDSR fp = original_backbone(o, cfg, data, out);
  ToyOSDSR q = fp.clone();
  calib::PipelineLog log;
  if (o.method == "maxmin") {
    calib::run_maxmin_baseline(q, data, cfg.bits, cfg.calibration_images);
  } else {
    const auto plan = cfg.plan(q);
    calib::prepare_quantizers(q, data, q.timestep(), cfg.bits, plan.layer, plan.calibration_images);
    calib::run_rpq(q, data, plan, log);
    calib::run_et(q, data, plan, log);
  }
  const std::string stem = "quantized_" + o.method + "_" + bits_stem(cfg.bits);
  io::save_checkpoint(out / (stem + ".ckpt"), q.state());
  save_stage_log(out / (stem + "_stages.csv"), log);
  const auto report = calib::evaluate(q, fp, eval_set(cfg), o.method);
  write_text(out / (stem + "_metrics.csv"), csv_reports({report}));
  log_line(o.method + " " + cfg.bits.to_string() + ": psnr-to-fp " + std::to_string(report.psnr_db) + " dB");
  return kExitOk;
}

int cmd_calibrate(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out = prepare_out(cfg, "calibrate");
  const Dataset data = train_set(cfg);
  const ToyOSDSR original = original_backbone(o, cfg, data, out);
  auto trq = calib::run_trq(original, data, cfg.timesteps, cfg.bits, trq_options(cfg));
  write_text(out / "timestep_profile.csv", trq.profile.to_csv());
  io::save_checkpoint(out / ("backbone_trq_t" + std::to_string(trq.best_t) + ".ckpt"), trq.backbone.state());
  log_line("timestep retraining selected t=" + std::to_string(trq.best_t));
  ToyOSDSR q = trq.backbone.clone();
  const auto plan = cfg.plan(q);
  calib::prepare_quantizers(q, data, q.timestep(), cfg.bits, plan.layer, plan.calibration_images);
  const fs::path stages = out / "stages";
  fs::create_directories(stages);
  std::size_t index = 0;
  auto hook = [&](const std::string& stage, const ToyOSDSR& m) {
    std::ostringstream name;
    name << std::setw(2) << std::setfill('0') << index++ << '_' << stage << ".ckpt";
    io::save_checkpoint(stages / name.str(), m.state());
  };
  calib::PipelineLog log;
  calib::run_rpq(q, data, plan, log, hook);
  calib::run_et(q, data, plan, log, hook);
  const std::string stem = "qartsr_" + bits_stem(cfg.bits);
  io::save_checkpoint(out / (stem + ".ckpt"), q.state());
  save_stage_log(out / (stem + "_stages.csv"), log);
  const auto report = calib::evaluate(q, trq.backbone, eval_set(cfg), "qartsr");
  write_text(out / (stem + "_metrics.csv"), csv_reports({report}));
  log_line("qartsr " + cfg.bits.to_string() + ": psnr-to-fp " + std::to_string(report.psnr_db) + " dB");
  return kExitOk;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const RunConfig cfg = resolve(o);
  const fs::path out = prepare_out(cfg, "eval");
  const ToyOSDSR q = load_model(o.checkpoint);
  ToyOSDSR fp = o.reference.empty() ? q.clone() : load_model(o.reference);
  fp.remove_quantizers();
  const std::string tag = o.tag.empty() ? fs::path(o.checkpoint).stem().string() : o.tag;
  const auto report = calib::evaluate(q, fp, eval_set(cfg), tag);
  write_text(out / ("eval_" + tag + ".json"), report.to_json().dump(2) + "\n");
  write_text(out / ("eval_" + tag + ".csv"), csv_reports({report}));
  std::cout << csv_reports({report});
  return kExitOk;
}

int cmd_ablate(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out = prepare_out(cfg, "ablate");
  const Dataset data = train_set(cfg);
  const Dataset eval = eval_set(cfg);
  const ToyOSDSR original = original_backbone(o, cfg, data, out);
  const auto trq = calib::run_trq(original, data, cfg.timesteps, cfg.bits, trq_options(cfg));
  std::vector<metrics::MetricReport> rows;
  for (auto arm : calib::kAllArms) {
    const ToyOSDSR& backbone = calib::uses_trq(arm) ? trq.backbone : original;
    auto plan = cfg.plan(backbone);
    calib::PipelineLog log;
    const ToyOSDSR q = calib::quantize_arm(arm, backbone, data, plan, log);
    auto report = calib::evaluate(q, backbone, eval, calib::to_string(arm));
    for (const auto& s : log.stages) {
      const auto curve = log.totals(s);
      if (!curve.empty()) report.stage_losses.push_back(curve.back());
    }
    log_line(report.csv_row());
    rows.push_back(std::move(report));
  }
  write_text(out / "ablation.csv", csv_reports(rows));
  return kExitOk;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

int cmd_report(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path dir(cfg.out_dir);
  if (!fs::is_directory(dir)) throw IoError("output directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".csv" && e.path().filename() != "summary.csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<std::vector<std::string>> rows;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    if (!std::getline(in, line) || line != metrics::MetricReport::csv_header()) continue;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto cells = split_csv(line);
      cells.insert(cells.begin(), f.stem().string());
      rows.push_back(std::move(cells));
    }
  }
  std::ostringstream csv;
  csv << "source," << metrics::MetricReport::csv_header() << '\n';
  std::cout << std::left << std::setw(36) << "source" << std::setw(14) << "tag" << std::setw(8) << "bits" << std::right
            << std::setw(10) << "psnr_db" << std::setw(10) << "ssim" << std::setw(14) << "latent_error" << '\n';
  for (const auto& r : rows) {
    if (r.size() != 6) continue;
    csv << r[0] << ',' << r[1] << ",\"" << r[2] << "\"," << r[3] << ',' << r[4] << ',' << r[5] << '\n';
    std::cout << std::left << std::setw(36) << r[0] << std::setw(14) << r[1] << std::setw(8) << r[2] << std::right
              << std::fixed << std::setprecision(3) << std::setw(10) << std::stod(r[3]) << std::setw(10)
              << std::stod(r[4]) << std::setw(14) << std::stod(r[5]) << '\n';
  }
  write_text(dir / "summary.csv", csv.str());
  log_line(std::to_string(rows.size()) + " rows from " + std::to_string(files.size()) + " files");
  return kExitOk;
}

const CLI::Validator kBitsValidator(
    [](std::string& text) {
      try {
        calib::BitWidth::parse(text);
      } catch (const ParameterError& e) {
        return std::string(e.what());
      }
      return std::string();
    },
    "W,A");

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Quantisation toolkit for a toy one-step diffusion super-resolution model", "qartsr"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--out", o.out, "Output directory (overrides QART_OUT and the config)");
  app.add_option("--seed", o.seed, "Random seed");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic calibration set with a manifest");
  gen->add_option("--size", o.size, "Number of pairs");

  auto* train = app.add_subcommand("train-backbone", "Train the FP backbone at one timestep");
  train->add_option("--timestep", o.timestep, "Training timestep");
  train->add_option("--epochs", o.epochs, "Training epochs");

  auto* sweep = app.add_subcommand("sweep-timestep", "Latent quantisation error per timestep (CSV)");
  sweep->add_option("--bits", o.bits, "W,A")->check(kBitsValidator);
  sweep->add_option("--t-list", o.t_list, "Timesteps")->delimiter(',');
  sweep->add_option("--checkpoint", o.checkpoint, "Backbone checkpoint")->check(CLI::ExistingFile);

  auto* quant = app.add_subcommand("quantize", "Quantise a backbone with MaxMin or the full layer finetuning");
  quant->add_option("--method", o.method, "maxmin or qartsr")->check(CLI::IsMember({"maxmin", "qartsr"}));
  quant->add_option("--bits", o.bits, "W,A")->check(kBitsValidator);
  quant->add_option("--checkpoint", o.checkpoint, "Backbone checkpoint")->check(CLI::ExistingFile);
  quant->add_option("--stage-steps", o.stage_steps, "Steps per module stage");
  quant->add_option("--et-steps", o.et_steps, "Extended training steps");

  auto* cal = app.add_subcommand("calibrate", "Timestep retraining, reversed per-module stages, extended training");
  cal->add_option("--bits", o.bits, "W,A")->check(kBitsValidator);
  cal->add_option("--checkpoint", o.checkpoint, "Original backbone checkpoint")->check(CLI::ExistingFile);
  cal->add_option("--stage-steps", o.stage_steps, "Steps per module stage");
  cal->add_option("--et-steps", o.et_steps, "Extended training steps");

  auto* ev = app.add_subcommand("eval", "PSNR / SSIM / latent error against the FP backbone");
  ev->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--reference", o.reference, "FP reference checkpoint (default: the model's own backbone)")
      ->check(CLI::ExistingFile);
  ev->add_option("--tag", o.tag, "Row tag");

  auto* abl = app.add_subcommand("ablate", "Run the six ablation arms");
  abl->add_option("--bits", o.bits, "W,A")->check(kBitsValidator);
  abl->add_option("--checkpoint", o.checkpoint, "Original backbone checkpoint")->check(CLI::ExistingFile);
  abl->add_option("--stage-steps", o.stage_steps, "Steps per module stage");
  abl->add_option("--et-steps", o.et_steps, "Extended training steps");

  app.add_subcommand("report", "Collect metric CSVs of the output directory into summary.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e);
      return kExitOk;
    }
    std::cerr << "qartsr: usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train_backbone(o);
    if (*sweep) return cmd_sweep(o);
    if (*quant) return cmd_quantize(o);
    if (*cal) return cmd_calibrate(o);
    if (*ev) return cmd_eval(o);
    if (*abl) return cmd_ablate(o);
    return cmd_report(o);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    if (const auto nl = msg.find('\n'); nl != std::string::npos) msg.resize(nl);
    std::cerr << "qartsr: error: " << msg << "\n";
    return kExitFailure;
  }
}

int dispatch(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("qartsr");
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data());
}

}  // namespace qart::cli
