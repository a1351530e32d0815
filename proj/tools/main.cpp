#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "quadgate/data.hpp"
#include "quadgate/gradcheck.hpp"
#include "quadgate/train.hpp"

namespace fs = std::filesystem;
using namespace qg;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

// Flat `key = value` file, '#' starts a comment.
std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file '" + path + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::size_t eq = line.find('=');
    auto trim = [](std::string s) {
      const char* ws = " \t\r";
      const std::size_t b = s.find_first_not_of(ws);
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(ws) - b + 1);
    };
    if (eq == std::string::npos) {
      if (!trim(line).empty()) {
        throw config_error(path + ":" + std::to_string(line_no) + ": expected `key = value`");
      }
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw config_error(path + ":" + std::to_string(line_no) + ": empty key");
    }
    kv[key] = value;
  }
  return kv;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    out.push_back(std::stoi(s.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return out;
}

struct RunSettings {
  ModelConfig model;
  TrainConfig train;
  std::string preset = "desk";
};

void apply_preset(RunSettings& rs, const std::string& preset) {
  rs.preset = preset;
  if (preset == "desk") {
    rs.model = ModelConfig::desk_scale();
    rs.train = TrainConfig{};
  } else if (preset == "paper") {
    // published settings: 448px input, batch 16, 50 epochs, base lr 1e-5
    rs.model = ModelConfig::paper_scale();
    rs.train = TrainConfig{};
    rs.train.epochs = 50;
    rs.train.batch_size = 16;
    rs.train.optimizer.lr = 1e-5;
  } else {
    throw config_error("unknown preset '" + preset + "' (expected desk or paper)");
  }
}

void apply_config_entry(RunSettings& rs, const std::string& key, const std::string& value) {
  ModelConfig& m = rs.model;
  TrainConfig& t = rs.train;
  if (key == "preset") apply_preset(rs, value);
  else if (key == "input_size") m.input_size = std::stoi(value);
  else if (key == "channels") m.channels = std::stoi(value);
  else if (key == "patch_size") m.patch_size = std::stoi(value);
  else if (key == "stage_channels") m.stage_channels = parse_int_list(value);
  else if (key == "stage_heads") m.stage_heads = parse_int_list(value);
  else if (key == "stage_depths") m.stage_depths = parse_int_list(value);
  else if (key == "sra_ratios") m.sra_ratios = parse_int_list(value);
  else if (key == "num_regions") m.num_regions = std::stoi(value);
  else if (key == "cag_intermediate") m.cag_intermediate = std::stoi(value);
  else if (key == "aggregator") m.aggregator.kind = parse_aggregator(value);
  else if (key == "aggregator_dim") m.aggregator.dim = std::stoi(value);
  else if (key == "aggregator_depth") m.aggregator.depth = std::stoi(value);
  else if (key == "aggregator_heads") m.aggregator.heads = std::stoi(value);
  else if (key == "head_hidden") m.head_hidden = std::stoi(value);
  else if (key == "encoder") m.encoder_kind = parse_encoder(value);
  else if (key == "modality") m.modality = parse_modality(value);
  else if (key == "epochs") t.epochs = std::stoi(value);
  else if (key == "batch_size") t.batch_size = std::stoi(value);
  else if (key == "lr") t.optimizer.lr = std::stod(value);
  else if (key == "beta1") t.optimizer.beta1 = std::stod(value);
  else if (key == "beta2") t.optimizer.beta2 = std::stod(value);
  else if (key == "weight_decay") t.optimizer.weight_decay = std::stod(value);
  else if (key == "eta_min") t.eta_min = std::stod(value);
  else if (key == "scheduler_period") t.scheduler_period = std::stol(value);
  else if (key == "scheduler_mult") t.scheduler_mult = std::stoi(value);
  else if (key == "transmix") t.use_transmix = (value == "1" || value == "true" || value == "on");
  else throw config_error("unknown config key '" + key + "'");
}

std::string int_list_str(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Resolved-configuration audit block, printed before any side effect.
void print_settings(const std::string& command, const RunSettings& rs, std::uint64_t seed) {
  const ModelConfig& m = rs.model;
  const TrainConfig& t = rs.train;
  std::printf("[config] command = %s\n", command.c_str());
  std::printf("[config] preset = %s\n", rs.preset.c_str());
  std::printf("[config] seed = %llu\n", static_cast<unsigned long long>(seed));
  std::printf("[config] input_size = %d\n", m.input_size);
  std::printf("[config] channels = %d\n", m.channels);
  std::printf("[config] patch_size = %d\n", m.patch_size);
  std::printf("[config] stage_channels = %s\n", int_list_str(m.stage_channels).c_str());
  std::printf("[config] stage_heads = %s\n", int_list_str(m.stage_heads).c_str());
  std::printf("[config] stage_depths = %s\n", int_list_str(m.stage_depths).c_str());
  std::printf("[config] sra_ratios = %s\n", int_list_str(m.sra_ratios).c_str());
  std::printf("[config] num_regions = %d\n", m.num_regions);
  std::printf("[config] cag_intermediate = %d\n", m.cag_channels());
  std::printf("[config] encoder = %s\n", to_string(m.encoder_kind).c_str());
  std::printf("[config] aggregator = %s dim=%d depth=%d heads=%d\n",
              to_string(m.aggregator.kind).c_str(), m.aggregator.dim, m.aggregator.depth,
              m.aggregator.heads);
  std::printf("[config] head_hidden = %d\n", m.head_hidden);
  std::printf("[config] modality = %s\n", to_string(m.modality).c_str());
  std::printf("[config] epochs = %d\n", t.epochs);
  std::printf("[config] batch_size = %d\n", t.batch_size);
  std::printf("[config] lr = %g\n", t.optimizer.lr);
  std::printf("[config] betas = %g,%g\n", t.optimizer.beta1, t.optimizer.beta2);
  std::printf("[config] weight_decay = %g\n", t.optimizer.weight_decay);
  std::printf("[config] transmix = %s\n", t.use_transmix ? "on" : "off");
}

void print_metrics_row(const std::string& label, const Metrics& m) {
  const std::string pc = m.pc_defined() ? std::to_string(m.pc).substr(0, 8) : "undef";
  std::printf("%-24s mae %8.4f   pc %8s   ae_sd %8.4f\n", label.c_str(), m.mae, pc.c_str(),
              m.ae_sd);
}

int cmd_synth(const std::string& out_dir, int n, int side, const std::string& modality,
              std::uint64_t seed, double noise) {
  SyntheticSpec spec;
  spec.count = n;
  spec.side = side;
  spec.modality = parse_modality(modality);
  spec.seed = seed;
  spec.noise = noise;
  std::printf("[config] command = synth\n[config] out = %s\n[config] n = %d\n"
              "[config] side = %d\n[config] modality = %s\n[config] seed = %llu\n"
              "[config] noise = %g\n",
              out_dir.c_str(), n, side, modality.c_str(),
              static_cast<unsigned long long>(seed), noise);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) {
    throw io_error("cannot create output directory '" + out_dir + "'");
  }

  std::vector<Sample> data = generate_synthetic(spec);
  // written scores live on the modality's level grid
  for (Sample& s : data) s.score = snap_to_level(spec.modality, s.score);
  for (const Sample& s : data) {
    write_pgm((fs::path(out_dir) / (s.id + ".pgm")).string(), s.image);
  }
  write_scores_csv((fs::path(out_dir) / "scores.csv").string(), data);
  std::printf("wrote %zu images + scores.csv to %s\n", data.size(), out_dir.c_str());
  return 0;
}

int cmd_train(const RunSettings& rs, const std::string& data_dir, std::uint64_t seed,
              const std::string& out_ckpt) {
  RunSettings run = rs;
  run.train.seed = seed;
  fs::path metrics(out_ckpt);
  metrics.replace_extension(".metrics.csv");
  run.train.metrics_csv = metrics.string();

  print_settings("train", run, seed);
  std::vector<Sample> data = load_dataset(data_dir, (fs::path(data_dir) / "scores.csv").string(),
                                          run.model.input_size, run.model.channels,
                                          run.model.modality);
  if (data.empty()) throw config_error("dataset '" + data_dir + "' is empty");
  Model model(run.model, seed);
  std::printf("[config] parameters = %lld\n", model.count_params());

  TrainResult result = train(model, data, {}, run.train);
  save_checkpoint(model, out_ckpt);
  for (const auto& row : result.log) {
    if (row.split == "train") {
      std::printf("epoch %3d  loss %10.5f  lr %10.3e  ", row.epoch, row.loss, row.lr);
      print_metrics_row("train", row.metrics);
    }
  }
  std::printf("checkpoint: %s\nmetrics: %s\n", out_ckpt.c_str(), run.train.metrics_csv.c_str());
  if (result.aborted) {
    std::fprintf(stderr, "error: %s (last good checkpoint written)\n",
                 result.abort_reason.c_str());
    return kExitNumeric;
  }
  return 0;
}

int cmd_eval(const std::vector<std::string>& ckpts, const std::string& data_dir,
             const std::string& csv_out) {
  std::printf("[config] command = eval\n[config] data = %s\n[config] checkpoints = %zu\n",
              data_dir.c_str(), ckpts.size());
  std::vector<std::unique_ptr<Model>> models;
  for (const std::string& path : ckpts) {
    models.push_back(load_checkpoint(path));
    std::printf("[config] member = %s (%s encoder, %s aggregator)\n", path.c_str(),
                to_string(models.back()->config().encoder_kind).c_str(),
                to_string(models.back()->config().aggregator.kind).c_str());
  }
  const ModelConfig& first = models.front()->config();
  for (const auto& m : models) {
    if (m->config().input_size != first.input_size || m->config().modality != first.modality) {
      throw config_error("checkpoints disagree on input size or modality; cannot ensemble");
    }
  }
  std::vector<Sample> data = load_dataset(data_dir, (fs::path(data_dir) / "scores.csv").string(),
                                          first.input_size, first.channels, first.modality);
  if (data.empty()) throw config_error("dataset '" + data_dir + "' is empty");
  std::vector<double> targets;
  for (const Sample& s : data) targets.push_back(s.score);

  std::ofstream csv;
  if (!csv_out.empty()) {
    csv.open(csv_out, std::ios::trunc);
    csv << "member,mae,pc,ae_sd\n";
  }
  std::vector<std::vector<double>> member_preds;
  for (std::size_t i = 0; i < models.size(); ++i) {
    member_preds.push_back(predict_all(*models[i], data));
    Metrics m = evaluate(member_preds.back(), targets);
    print_metrics_row(ckpts[i], m);
    if (csv.is_open()) {
      csv << ckpts[i] << ',' << m.mae << ',' << m.pc << ',' << m.ae_sd << '\n';
    }
  }
  if (models.size() > 1) {
    std::vector<double> mean_preds(data.size(), 0.0);
    for (const auto& preds : member_preds) {
      for (std::size_t i = 0; i < preds.size(); ++i) mean_preds[i] += preds[i];
    }
    for (double& p : mean_preds) p /= static_cast<double>(models.size());
    Metrics m = evaluate(mean_preds, targets);
    print_metrics_row("ensemble(mean)", m);
    if (csv.is_open()) csv << "ensemble," << m.mae << ',' << m.pc << ',' << m.ae_sd << '\n';
  }
  return 0;
}

int cmd_gradcheck(int size, std::uint64_t seed, double step, bool corrupt) {
  std::printf("[config] command = gradcheck\n[config] size = %d\n[config] seed = %llu\n"
              "[config] step = %g\n[config] threads = %d\n",
              size, static_cast<unsigned long long>(seed), step, worker_threads());
  if (corrupt) {
    // negative control: a deliberately wrong backward rule must be caught
    const double err = gradcheck_corrupt_fixture(seed);
    std::printf("corrupt-fixture   max_rel_err %.3e %s\n", err,
                err < 1e-4 ? "MISSED" : "CAUGHT");
    if (err < 1e-4) {
      std::fprintf(stderr, "error: the oracle failed to flag a corrupted gradient rule\n");
    }
    return err < 1e-4 ? kExitNumeric : 0;
  }

  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (const auto& r : gradcheck_ops(seed)) {
    std::printf("op  %-38s max_rel_err %.3e %s\n", r.name.c_str(), r.max_rel_err,
                r.max_rel_err < 1e-4 ? "PASS" : "FAIL");
    ok = ok && r.max_rel_err < 1e-4;
  }
  const auto reports = gradcheck_model(ModelConfig::gradcheck_scale(size), seed, step,
                                       worker_threads());
  for (const auto& r : reports) {
    std::printf("param %-52s max_rel_err %.3e %s\n", r.name.c_str(), r.max_rel_err,
                r.max_rel_err < 1e-4 ? "PASS" : "FAIL");
    ok = ok && r.max_rel_err < 1e-4;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("gradcheck: %zu parameter blocks, %.1fs, %s\n", reports.size(), secs,
              ok ? "PASS" : "FAIL");
  return ok ? 0 : kExitNumeric;
}

int cmd_mixdemo(const std::string& data_dir, const std::string& ckpt, int pairs,
                std::uint64_t seed, const std::string& out_dir) {
  std::printf("[config] command = mixdemo\n[config] data = %s\n[config] ckpt = %s\n"
              "[config] pairs = %d\n[config] seed = %llu\n[config] out = %s\n",
              data_dir.c_str(), ckpt.c_str(), pairs, static_cast<unsigned long long>(seed),
              out_dir.c_str());
  auto model = load_checkpoint(ckpt);
  const ModelConfig& cfg = model->config();
  std::vector<Sample> data = load_dataset(data_dir, (fs::path(data_dir) / "scores.csv").string(),
                                          cfg.input_size, cfg.channels, cfg.modality);
  if (data.size() < 2) throw config_error("mix demo needs at least two samples");

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) {
    throw io_error("cannot create output directory '" + out_dir + "'");
  }

  std::ofstream report((fs::path(out_dir) / "report.csv").string(), std::ios::trunc);
  report << "idA,idB,yA,yB,lambda,ybar\n";
  char buf[160];
  for (int p = 0; p < pairs; ++p) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(p)));
    const int ia = rng.uniform_int(0, static_cast<int>(data.size()) - 1);
    int ib = rng.uniform_int(0, static_cast<int>(data.size()) - 2);
    if (ib >= ia) ++ib;
    const Sample& a = data[static_cast<std::size_t>(ia)];
    const Sample& b = data[static_cast<std::size_t>(ib)];

    CutMask mask = sample_cut_mask(cfg.input_size, cfg.input_size, rng);
    Tensor mixed = apply_cutmix(a.image, b.image, mask);
    {
      TapeScope scope;
      NoGradGuard ng;
      model->forward(mixed);
    }
    auto att = model->cls_attention();
    auto [gh, gw] = model->attention_grid();
    const double lambda = compute_lambda(att, mask, gh, gw);
    const double ybar = mixed_score(a.score, b.score, lambda);

    const std::string stem = "pair" + std::to_string(p);
    write_pgm((fs::path(out_dir) / (stem + "_a.pgm")).string(), slice(a.image, 0, 0, 1));
    write_pgm((fs::path(out_dir) / (stem + "_b.pgm")).string(), slice(b.image, 0, 0, 1));
    write_pgm((fs::path(out_dir) / (stem + "_mixed.pgm")).string(), slice(mixed, 0, 0, 1));
    std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,%.17g,%.17g", a.id.c_str(), b.id.c_str(),
                  a.score, b.score, lambda, ybar);
    report << buf << '\n';
  }
  std::printf("wrote %d mixed pairs + report.csv to %s\n", pairs, out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quadrant-split gated-attention severity regression"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out = "data";
  int synth_n = 100, synth_side = 64;
  std::string synth_modality = "cip";
  std::uint64_t synth_seed = 0;
  double synth_noise = 0.05;
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--n", synth_n, "number of images");
  synth->add_option("--side", synth_side, "image side length");
  synth->add_option("--modality", synth_modality, "ge, lo or cip");
  synth->add_option("--seed", synth_seed, "master seed");
  synth->add_option("--noise", synth_noise, "uniform noise amplitude");

  // train
  auto* tr = app.add_subcommand("train", "train a model on a dataset");
  std::string train_data, train_config, train_out = "model.ckpt";
  int train_epochs = -1, train_regions = 0;
  std::string train_aggregator, train_encoder;
  std::uint64_t train_seed = 0;
  bool no_transmix = false;
  std::string train_preset = "desk";
  tr->add_option("--data", train_data, "dataset directory")->required();
  tr->add_option("--config", train_config, "key=value config file");
  tr->add_option("--epochs", train_epochs, "override epoch count");
  tr->add_option("--seed", train_seed, "master seed");
  tr->add_flag("--no-transmix", no_transmix, "disable the conditional augmentation");
  tr->add_option("--regions", train_regions, "2, 4 or 6 split regions");
  tr->add_option("--aggregator", train_aggregator, "vit, gap or pvt");
  tr->add_option("--encoder", train_encoder, "pvt or vit region encoder");
  tr->add_option("--preset", train_preset, "desk or paper settings");
  tr->add_option("--out", train_out, "checkpoint path");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate checkpoints, ensemble when several");
  std::vector<std::string> eval_ckpts;
  std::string eval_data, eval_csv;
  ev->add_option("--ckpt", eval_ckpts, "checkpoint file(s)")->required()->expected(-1);
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--csv", eval_csv, "optional metrics CSV output");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  int gc_size = 16;
  std::uint64_t gc_seed = 1;
  double gc_step = 5e-6;
  bool gc_corrupt = false;
  gc->add_option("--size", gc_size, "input size of the check configuration");
  gc->add_option("--seed", gc_seed, "master seed");
  gc->add_option("--step", gc_step, "central-difference step");
  gc->add_flag("--corrupt", gc_corrupt, "run the wrong-gradient negative control");

  // mixdemo
  auto* mx = app.add_subcommand("mixdemo", "write mixed image pairs and their relabeling");
  std::string mix_data, mix_ckpt, mix_out = "mixdemo";
  int mix_pairs = 8;
  std::uint64_t mix_seed_v = 0;
  mx->add_option("--data", mix_data, "dataset directory")->required();
  mx->add_option("--ckpt", mix_ckpt, "checkpoint providing the attention maps")->required();
  mx->add_option("--pairs", mix_pairs, "number of pairs");
  mx->add_option("--seed", mix_seed_v, "master seed");
  mx->add_option("--out", mix_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) {
      return cmd_synth(synth_out, synth_n, synth_side, synth_modality, synth_seed, synth_noise);
    }
    if (*tr) {
      RunSettings rs;
      apply_preset(rs, train_preset);
      if (!train_config.empty()) {
        for (const auto& [k, v] : read_config_file(train_config)) apply_config_entry(rs, k, v);
      }
      if (train_epochs > 0) rs.train.epochs = train_epochs;
      if (train_regions > 0) rs.model.num_regions = train_regions;
      if (!train_aggregator.empty()) rs.model.aggregator.kind = parse_aggregator(train_aggregator);
      if (!train_encoder.empty()) rs.model.encoder_kind = parse_encoder(train_encoder);
      if (no_transmix) rs.train.use_transmix = false;
      rs.model.validate();
      return cmd_train(rs, train_data, train_seed, train_out);
    }
    if (*ev) return cmd_eval(eval_ckpts, eval_data, eval_csv);
    if (*gc) return cmd_gradcheck(gc_size, gc_seed, gc_step, gc_corrupt);
    if (*mx) return cmd_mixdemo(mix_data, mix_ckpt, mix_pairs, mix_seed_v, mix_out);
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  } catch (const error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return 0;
}
