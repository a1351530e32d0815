#include "quadgate/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace qg {

WeightTable build_weight_table(const std::vector<long>& counts, long total, Modality modality) {
  const int k = level_count(modality);
  if (static_cast<int>(counts.size()) != k) {
    throw contract_error("weight table: expected " + std::to_string(k) + " level counts, got " +
                         std::to_string(counts.size()));
  }
  long sum = 0;
  for (long c : counts) sum += c;
  if (sum != total) {
    throw contract_error("weight table: counts sum to " + std::to_string(sum) + ", not " +
                         std::to_string(total));
  }
  WeightTable table;
  table.modality = modality;
  table.total = total;
  table.k = k;
  table.weights.resize(static_cast<std::size_t>(k), 0.0);
  for (int l = 0; l < k; ++l) {
    const long c = counts[static_cast<std::size_t>(l)];
    if (c > 0) {
      table.weights[static_cast<std::size_t>(l)] =
          static_cast<double>(total) / (static_cast<double>(c) * k);
    }
  }
  return table;
}

Tensor weighted_l1_loss(const Tensor& preds, const std::vector<double>& targets,
                        const WeightTable& table) {
  if (preds.rank() != 1 || preds.size() != static_cast<int>(targets.size())) {
    throw contract_error("weighted_l1_loss: " + std::to_string(preds.size()) +
                         " predictions vs " + std::to_string(targets.size()) + " targets");
  }
  const int n = preds.size();
  Tensor target_t = Tensor::from({n}, targets);
  Tensor weight_t = Tensor::zeros({n});
  for (int i = 0; i < n; ++i) {
    weight_t.values()[static_cast<std::size_t>(i)] =
        table.weight_for(targets[static_cast<std::size_t>(i)]);
  }
  Tensor weighted = mul(abs_val(sub(preds, target_t)), weight_t);
  return mul_scalar(sum_all(weighted), 1.0 / n);
}

AdamW::AdamW(AdamWConfig cfg, const ParamList& params) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
  }
}

void AdamW::step(const ParamList& params) {
  if (params.size() != m_.size()) {
    throw contract_error("optimizer state tracks " + std::to_string(m_.size()) +
                         " parameter blocks, got " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw numeric_error("non-finite gradient in '" + p.name + "'; step aborted");
      }
    }
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& vals = params[i].tensor.values();
    const std::vector<double>* grad =
        params[i].tensor.has_grad() ? &params[i].tensor.grad() : nullptr;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double g = grad ? (*grad)[j] : 0.0;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      vals[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * vals[j]);
    }
  }
}

double CosineWarmRestarts::lr() const {
  return eta_min +
         (eta_max - eta_min) *
             (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) /
                             static_cast<double>(period))) /
             2.0;
}

void CosineWarmRestarts::tick() {
  ++t;
  if (t >= period) {
    t = 0;
    period *= mult;
  }
}

Metrics evaluate(const std::vector<double>& preds, const std::vector<double>& targets) {
  if (preds.empty() || preds.size() != targets.size()) {
    throw contract_error("evaluate: need equal nonempty prediction/target lists");
  }
  const std::size_t n = preds.size();
  Metrics m;
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) abs_sum += std::fabs(preds[i] - targets[i]);
  m.mae = abs_sum / static_cast<double>(n);

  double ae_var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = std::fabs(preds[i] - targets[i]) - m.mae;
    ae_var += d * d;
  }
  m.ae_sd = std::sqrt(ae_var / static_cast<double>(n));

  double mp = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mp += preds[i];
    mt += targets[i];
  }
  mp /= static_cast<double>(n);
  mt /= static_cast<double>(n);
  double spt = 0.0, spp = 0.0, stt = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    spt += (preds[i] - mp) * (targets[i] - mt);
    spp += (preds[i] - mp) * (preds[i] - mp);
    stt += (targets[i] - mt) * (targets[i] - mt);
  }
  if (stt > 0.0 && spp > 0.0) {
    m.pc = spt / std::sqrt(spp * stt);
  }  // else undefined: constant targets (or constant predictions)
  return m;
}

std::vector<double> predict_all(const Model& model, const std::vector<Sample>& data) {
  std::vector<double> preds;
  preds.reserve(data.size());
  for (const Sample& s : data) preds.push_back(model.predict_score(s.image));
  return preds;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochRow>& rows) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot write metrics log '" + path + "'");
  out << "epoch,split,mae,pc,ae_sd,lr,loss\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.split << ',' << fmt_double(r.metrics.mae) << ','
        << fmt_double(r.metrics.pc) << ',' << fmt_double(r.metrics.ae_sd) << ','
        << fmt_double(r.lr) << ',' << fmt_double(r.loss) << '\n';
  }
}

std::vector<std::vector<double>> snapshot_params(const ParamList& params) {
  std::vector<std::vector<double>> snap;
  snap.reserve(params.size());
  for (const auto& p : params) snap.push_back(p.tensor.values());
  return snap;
}

void restore_params(const ParamList& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.values() = snap[i];
}

double plain_weighted_loss(const std::vector<double>& preds, const std::vector<double>& targets,
                           const WeightTable& table) {
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    sum += table.weight_for(targets[i]) * std::fabs(preds[i] - targets[i]);
  }
  return sum / static_cast<double>(preds.size());
}

}  // namespace

TrainResult train(Model& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& test_set, const TrainConfig& cfg) {
  if (train_set.empty()) throw contract_error("train: empty training set");
  if (cfg.epochs < 1 || cfg.batch_size < 1) {
    throw config_error("train: epochs and batch size must be positive");
  }
  const Modality modality = model.config().modality;
  const double scale = score_max(modality);

  WeightTable table = build_weight_table(score_histogram(train_set, modality),
                                         static_cast<long>(train_set.size()), modality);
  ParamList params = model.params();
  AdamW optimizer(cfg.optimizer, params);

  const long steps_per_epoch =
      (static_cast<long>(train_set.size()) + cfg.batch_size - 1) / cfg.batch_size;
  CosineWarmRestarts scheduler{cfg.optimizer.lr, cfg.eta_min,
                               cfg.scheduler_period > 0 ? cfg.scheduler_period : steps_per_epoch,
                               0, cfg.scheduler_mult};

  EligibilityRule rule{modality};
  // The augmentation forward must not record gradients. The gap aggregator
  // has no class attention; mixing then falls back to a uniform map over the
  // region grid, i.e. plain area weighting.
  const bool gap = model.config().aggregator.kind == AggregatorKind::gap;
  const auto region_grid = model.config().region_grid();
  AttentionProvider provider = [&model, gap, region_grid](const Tensor& image)
      -> std::pair<std::vector<double>, std::pair<int, int>> {
    if (gap) {
      const int p = region_grid.first * region_grid.second;
      return {std::vector<double>(static_cast<std::size_t>(p), 1.0 / p), region_grid};
    }
    TapeScope scope;
    NoGradGuard ng;
    model.forward(image);
    return {model.cls_attention(), model.attention_grid()};
  };

  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  auto rollback = snapshot_params(params);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, 777, static_cast<std::uint64_t>(epoch)));
    shuffle(order, shuffle_rng);

    double loss_sum = 0.0;
    long batches = 0;
    double last_lr = scheduler.lr();
    std::vector<double> epoch_preds, epoch_targets;

    bool aborted_now = false;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Sample> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_set[order[i]]);
      if (cfg.use_transmix) {
        batch = conditional_transmix(
            batch, rule, provider,
            mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch),
                     static_cast<std::uint64_t>(start / static_cast<std::size_t>(cfg.batch_size))));
      }

      Tape::active().clear();
      model.zero_grad();
      std::vector<Tensor> preds;
      std::vector<double> targets;
      preds.reserve(batch.size());
      targets.reserve(batch.size());
      for (const Sample& s : batch) {
        // model output is normalized severity; rescale for the loss
        preds.push_back(mul_scalar(model.forward(s.image), scale));
        targets.push_back(s.score);
      }
      Tensor pred_batch = concat(preds, 0);
      Tensor loss = weighted_l1_loss(pred_batch, targets, table);
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        restore_params(params, rollback);
        result.aborted = true;
        result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch);
        aborted_now = true;
        break;
      }

      last_lr = scheduler.lr();
      optimizer.set_lr(last_lr);
      backward(loss);
      optimizer.step(params);
      scheduler.tick();

      loss_sum += loss_value;
      ++batches;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        epoch_preds.push_back(pred_batch.values()[i]);
        epoch_targets.push_back(targets[i]);
      }
      Tape::active().clear();
      model.zero_grad();
    }
    if (aborted_now) break;

    const double epoch_loss = loss_sum / static_cast<double>(batches);
    result.log.push_back(
        {epoch, "train", evaluate(epoch_preds, epoch_targets), last_lr, epoch_loss});
    if (epoch == 1) result.first_epoch_loss = epoch_loss;
    result.final_epoch_loss = epoch_loss;

    if (!test_set.empty()) {
      std::vector<double> test_preds = predict_all(model, test_set);
      std::vector<double> test_targets;
      test_targets.reserve(test_set.size());
      for (const Sample& s : test_set) test_targets.push_back(s.score);
      result.log.push_back({epoch, "test", evaluate(test_preds, test_targets), last_lr,
                            plain_weighted_loss(test_preds, test_targets, table)});
    }
    rollback = snapshot_params(params);
  }

  write_metrics_csv(cfg.metrics_csv, result.log);
  return result;
}

}  // namespace qg
