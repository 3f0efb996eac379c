#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ttl/densenet.hpp"
#include "ttl/surgery.hpp"

namespace ttl {

enum class LossKind { cross_entropy, bce };

/// One preprocessed training example: `label` is used by cross entropy,
/// `targets` (a 0/1 vector) by binary cross entropy.
struct Example {
  Tensor input;
  std::size_t label = 0;
  Tensor targets;
};

struct EarlyStopConfig {
  std::size_t patience = 1;
};

struct PhaseConfig {
  std::string name;
  std::size_t epochs = 1;
  double base_lr = 1e-3;
  std::map<std::size_t, double> per_block_lr;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 9;
  std::set<std::size_t> freeze;
  std::optional<EarlyStopConfig> early_stop;
  LossKind loss = LossKind::cross_entropy;

  void validate() const {
    auto fail = [&](const std::string& why) { throw ConfigError("phase '" + name + "': " + why); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (!(base_lr > 0.0)) fail("learning rate must be > 0");
    for (const auto& [b, lr] : per_block_lr) {
      if (!(lr > 0.0)) fail("learning rate of block " + std::to_string(b) + " must be > 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) fail("weight decay must be >= 0");
    if (batch_size < 1) fail("batch size must be >= 1");
    if (early_stop && early_stop->patience < 1) fail("patience must be >= 1");
  }

  double lr_for(std::size_t block) const {
    const auto it = per_block_lr.find(block);
    return it == per_block_lr.end() ? base_lr : it->second;
  }
};

/// w <- w - lr * v with v <- momentum * v + (g + weight_decay * w).
inline void sgd_step(Tensor& w, const Tensor& g, Tensor& velocity, double lr, double momentum, double weight_decay) {
  w.require_same_shape(g, "sgd_step gradient");
  w.require_same_shape(velocity, "sgd_step velocity");
  if (!g.all_finite()) throw NumericError("non-finite gradient in sgd_step");
  auto wd = w.data();
  auto gd = g.data();
  auto vd = velocity.data();
  for (std::size_t i = 0; i < wd.size(); ++i) {
    vd[i] = momentum * vd[i] + (gd[i] + weight_decay * wd[i]);
    wd[i] -= lr * vd[i];
  }
}

/// Per-epoch early stopping on a monitored loss; improvement must be strict.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Records the loss of the next epoch; returns true when training should stop.
  bool update(double loss) {
    ++epoch_;
    if (loss < best_) {
      best_ = loss;
      best_epoch_ = epoch_;
      bad_ = 0;
    } else {
      ++bad_;
    }
    return bad_ >= patience_;
  }

  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t bad_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct EpochRecord {
  std::size_t epoch;  // 1-based within the phase
  double train_loss;
  double val_loss;
  double val_acc;
};

struct TrainReport {
  std::string phase;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::size_t budget = 0;  // configured epoch count
  bool stopped_early = false;
  DenseNet best_model;
};

/// Examples of one epoch, in the order produced by the data pipeline.
using TrainStream = std::function<std::vector<Example>(std::size_t epoch_index)>;

struct LossStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline double example_loss(LossKind kind, const Tensor& logits, const Example& e, Tensor* grad) {
  LossAndGrad lg = kind == LossKind::cross_entropy ? softmax_cross_entropy(logits, e.label)
                                                   : sigmoid_bce(logits, e.targets);
  if (grad) *grad = std::move(lg.grad);
  return lg.loss;
}

/// Accuracy is argmax agreement for cross entropy and per-label agreement at
/// logit 0 (probability 0.5) for binary cross entropy.
inline double example_accuracy(LossKind kind, const Tensor& logits, const Example& e) {
  if (kind == LossKind::cross_entropy) return argmax(logits) == e.label ? 1.0 : 0.0;
  double hits = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) hits += ((logits[k] > 0.0) == (e.targets[k] > 0.5)) ? 1.0 : 0.0;
  return hits / static_cast<double>(logits.size());
}

inline LossStats evaluate_loss(const DenseNet& model, const std::vector<Example>& set, LossKind kind) {
  if (set.empty()) throw ConfigError("evaluation set is empty");
  LossStats s;
  for (const Example& e : set) {
    const Tensor logits = forward_logits(model, e.input);
    s.loss += example_loss(kind, logits, e, nullptr);
    s.accuracy += example_accuracy(kind, logits, e);
  }
  s.loss /= static_cast<double>(set.size());
  s.accuracy /= static_cast<double>(set.size());
  if (!std::isfinite(s.loss)) throw NumericError("non-finite validation loss");
  return s;
}

using EpochCallback = std::function<void(const std::string& phase, const EpochRecord&)>;

/// One training phase. Returns the per-epoch trail and the best model by
/// validation loss. Frozen blocks keep every tensor bit-identical, including
/// batch-norm running statistics.
inline TrainReport run_phase(DenseNet& model, const TrainStream& stream, const std::vector<Example>& val,
                             const PhaseConfig& phase, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  phase.validate();
  const FreezeMask mask = freeze_blocks(model, phase.freeze);
  if (mask.all_frozen()) throw ConfigError("phase '" + phase.name + "': every block is frozen");
  std::vector<bool> train_blocks(mask.frozen.size());
  for (std::size_t b = 0; b < train_blocks.size(); ++b) train_blocks[b] = !mask.frozen[b];
  const std::size_t lowest = mask.lowest_trainable();

  DenseNet velocity = zeros_like(model);
  TrainReport report;
  report.phase = phase.name;
  report.budget = phase.epochs;
  report.best_model = model;
  double best_val = std::numeric_limits<double>::infinity();
  std::optional<EarlyStopper> stopper;
  if (phase.early_stop) stopper.emplace(phase.early_stop->patience);

  for (std::size_t epoch = 0; epoch < phase.epochs; ++epoch) {
    std::vector<Example> examples = stream(epoch);
    if (examples.empty()) throw ConfigError("phase '" + phase.name + "': empty training stream");
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(seed, "batches", epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += phase.batch_size) {
      const std::size_t n = std::min(phase.batch_size, order.size() - start);
      std::vector<Tensor> inputs;
      inputs.reserve(n);
      for (std::size_t i = 0; i < n; ++i) inputs.push_back(examples[order[start + i]].input);
      BatchTrace trace;
      const auto logits = forward_batch(model, inputs, &train_blocks, &trace);
      std::vector<Tensor> grads(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double l = example_loss(phase.loss, logits[i], examples[order[start + i]], &grads[i]);
        if (!std::isfinite(l)) {
          throw NumericError("phase '" + phase.name + "': non-finite training loss in epoch " +
                             std::to_string(epoch + 1));
        }
        loss_sum += l;
        grads[i] *= 1.0 / static_cast<double>(n);
      }
      DenseNet g = zeros_like(model);
      backward_batch(model, trace, grads, lowest, g);
      auto params = trainable_params(model);
      auto gparams = trainable_params(g);
      auto vparams = trainable_params(velocity);
      for (std::size_t p = 0; p < params.size(); ++p) {
        if (mask.is_frozen(params[p].block_index)) continue;
        if (!gparams[p].tensor->all_finite()) {
          throw NumericError("phase '" + phase.name + "': non-finite gradient for " + params[p].name +
                             " in epoch " + std::to_string(epoch + 1));
        }
        sgd_step(*params[p].tensor, *gparams[p].tensor, *vparams[p].tensor, phase.lr_for(params[p].block_index),
                 phase.momentum, phase.weight_decay);
      }
    }
    const LossStats v = evaluate_loss(model, val, phase.loss);
    const EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(examples.size()), v.loss, v.accuracy};
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(phase.name, rec);
    if (v.loss < best_val) {
      best_val = v.loss;
      report.best_epoch = epoch + 1;
      report.best_model = model;
    }
    if (stopper && stopper->update(v.loss)) {
      report.stopped_early = epoch + 1 < phase.epochs;
      break;
    }
  }
  return report;
}

/// Epoch counts scaled and rounded, never below one.
inline std::size_t scaled_epochs(double base, double scale) {
  if (!(scale > 0.0)) throw ConfigError("epoch scale must be > 0");
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(base * scale)));
}

struct TargetScheduleOptions {
  double scale = 1.0;
  double finetune_lr_scale = 1.0;  // multiplies the learning rates of phases 2-4; the ÷10 ratios are kept
  bool phase2_weight_decay = true;
  std::size_t batch_size = 9;
  double momentum = 0.9;
};

/// The four target-stage phases for a model with `num_blocks` dense blocks.
inline std::vector<PhaseConfig> target_phases(std::size_t num_blocks, const TargetScheduleOptions& opt = {}) {
  const std::size_t head = num_blocks + 1;
  const std::size_t patience = scaled_epochs(20, opt.scale);
  std::set<std::size_t> body;
  for (std::size_t b = 0; b < head; ++b) body.insert(b);

  PhaseConfig base;
  base.batch_size = opt.batch_size;
  base.momentum = opt.momentum;
  base.loss = LossKind::cross_entropy;

  PhaseConfig p1 = base;
  p1.name = "phase1";
  p1.epochs = scaled_epochs(10, opt.scale);
  p1.base_lr = 1e-3;
  p1.weight_decay = 0.01;
  p1.freeze = body;

  PhaseConfig p2 = base;
  p2.name = "phase2";
  p2.epochs = scaled_epochs(48, opt.scale);
  p2.base_lr = 1e-4 * opt.finetune_lr_scale;
  double lr = p2.base_lr;
  for (std::size_t b = head + 1; b-- > 0;) {
    p2.per_block_lr[b] = lr;
    lr /= 10.0;
  }
  p2.weight_decay = opt.phase2_weight_decay ? 0.01 : 0.0;
  p2.early_stop = EarlyStopConfig{patience};

  PhaseConfig p3 = base;
  p3.name = "phase3";
  p3.epochs = scaled_epochs(48, opt.scale);
  p3.base_lr = 1e-5 * opt.finetune_lr_scale;
  p3.weight_decay = 0.01;
  p3.early_stop = EarlyStopConfig{patience};

  PhaseConfig p4 = base;
  p4.name = "phase4";
  p4.epochs = scaled_epochs(48, opt.scale);
  p4.base_lr = 1e-5 * opt.finetune_lr_scale;
  p4.weight_decay = 0.0;

  return {p1, p2, p3, p4};
}

/// Cumulative epoch at the end of each phase's budget.
inline std::vector<std::size_t> phase_boundaries(const std::vector<PhaseConfig>& phases) {
  std::vector<std::size_t> out;
  std::size_t total = 0;
  for (const auto& p : phases) out.push_back(total += p.epochs);
  return out;
}

using PhaseCallback = std::function<void(std::size_t phase_index, const TrainReport&)>;

/// Runs phases in order; each phase starts from the previous phase's best model.
inline std::vector<TrainReport> run_schedule(DenseNet& model, const TrainStream& stream,
                                             const std::vector<Example>& val, const std::vector<PhaseConfig>& phases,
                                             std::uint64_t seed, const PhaseCallback& on_phase = {},
                                             const EpochCallback& on_epoch = {}) {
  std::vector<TrainReport> reports;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    TrainReport r = run_phase(model, stream, val, phases[i], derive_seed(seed, phases[i].name, i), on_epoch);
    model = r.best_model;
    if (on_phase) on_phase(i, r);
    reports.push_back(std::move(r));
  }
  return reports;
}

inline std::vector<TrainReport> run_target_schedule(DenseNet& model, const TrainStream& stream,
                                                    const std::vector<Example>& val,
                                                    const TargetScheduleOptions& opt, std::uint64_t seed,
                                                    const PhaseCallback& on_phase = {},
                                                    const EpochCallback& on_epoch = {}) {
  return run_schedule(model, stream, val, target_phases(model.config.num_blocks, opt), seed, on_phase, on_epoch);
}

struct IntermediateScheduleOptions {
  double scale = 1.0;
  double lr_scale = 1.0;
  std::size_t batch_size = 16;
  double momentum = 0.9;
};

inline std::vector<PhaseConfig> intermediate_phases(std::size_t num_blocks,
                                                    const IntermediateScheduleOptions& opt = {}) {
  PhaseConfig p1;
  p1.name = "stage2_phase1";
  p1.epochs = scaled_epochs(20, opt.scale);
  p1.base_lr = 1e-3 * opt.lr_scale;
  p1.batch_size = opt.batch_size;
  p1.momentum = opt.momentum;
  p1.loss = LossKind::bce;
  for (std::size_t b = 0; b <= num_blocks; ++b) p1.freeze.insert(b);
  PhaseConfig p2 = p1;
  p2.name = "stage2_phase2";
  p2.epochs = scaled_epochs(90, opt.scale);
  p2.base_lr = 1e-4 * opt.lr_scale;
  p2.freeze.clear();
  return {p1, p2};
}

inline std::vector<TrainReport> run_intermediate_schedule(DenseNet& model, const TrainStream& stream,
                                                          const std::vector<Example>& val,
                                                          const IntermediateScheduleOptions& opt, std::uint64_t seed,
                                                          const PhaseCallback& on_phase = {},
                                                          const EpochCallback& on_epoch = {}) {
  if (model.config.head_activation != HeadActivation::sigmoid) {
    throw ConfigError("intermediate stage needs a sigmoid head");
  }
  return run_schedule(model, stream, val, intermediate_phases(model.config.num_blocks, opt), seed, on_phase,
                      on_epoch);
}

// ---------------------------------------------------------------------------
// metrics

struct Metrics {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // rows: true class, cols: predicted
  std::vector<double> precision, recall, f1;
};

inline Metrics metrics_from_predictions(std::size_t num_classes, const std::vector<std::size_t>& truth,
                                        const std::vector<std::size_t>& predicted) {
  if (truth.empty()) throw ConfigError("metrics need at least one sample");
  if (truth.size() != predicted.size()) throw ShapeError("metrics: truth and prediction counts differ");
  Metrics m;
  m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) throw ShapeError("metrics: class index out of range");
    ++m.confusion[truth[i]][predicted[i]];
    if (truth[i] == predicted[i]) ++correct;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  auto ratio = [](double a, double b) { return b == 0.0 ? 0.0 : a / b; };
  for (std::size_t c = 0; c < num_classes; ++c) {
    double tp = static_cast<double>(m.confusion[c][c]), row = 0.0, col = 0.0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      row += static_cast<double>(m.confusion[c][k]);
      col += static_cast<double>(m.confusion[k][c]);
    }
    const double p = ratio(tp, col), r = ratio(tp, row);
    m.precision.push_back(p);
    m.recall.push_back(r);
    m.f1.push_back(ratio(2.0 * p * r, p + r));
  }
  return m;
}

inline std::vector<std::size_t> predict(const DenseNet& model, const std::vector<Example>& set) {
  std::vector<std::size_t> out;
  out.reserve(set.size());
  for (const Example& e : set) out.push_back(argmax(forward_logits(model, e.input)));
  return out;
}

inline Metrics evaluate(const DenseNet& model, const std::vector<Example>& set) {
  if (set.empty()) throw ConfigError("cannot evaluate on an empty set");
  std::vector<std::size_t> truth;
  for (const Example& e : set) truth.push_back(e.label);
  return metrics_from_predictions(model.config.num_outputs, truth, predict(model, set));
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string report_csv(const TrainReport& r) {
  std::string s = "epoch,train_loss,val_loss,val_acc\n";
  for (const auto& e : r.epochs) {
    s += std::to_string(e.epoch) + ',' + format_real(e.train_loss) + ',' + format_real(e.val_loss) + ',' +
         format_real(e.val_acc) + '\n';
  }
  return s;
}

inline std::string metrics_csv(const Metrics& m) {
  std::string s = "metric,value\naccuracy," + format_real(m.accuracy) + "\n\nclass,precision,recall,f1\n";
  for (std::size_t c = 0; c < m.precision.size(); ++c) {
    s += std::to_string(c) + ',' + format_real(m.precision[c]) + ',' + format_real(m.recall[c]) + ',' +
         format_real(m.f1[c]) + '\n';
  }
  s += "\nconfusion";
  for (std::size_t c = 0; c < m.confusion.size(); ++c) s += ",pred" + std::to_string(c);
  s += '\n';
  for (std::size_t r = 0; r < m.confusion.size(); ++r) {
    s += "true" + std::to_string(r);
    for (std::size_t v : m.confusion[r]) s += ',' + std::to_string(v);
    s += '\n';
  }
  return s;
}

}  // namespace ttl
