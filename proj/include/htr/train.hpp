#pragma once

#include <chrono>
#include <cstdio>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "htr/ctc.hpp"
#include "htr/data.hpp"
#include "htr/distill.hpp"
#include "htr/eval.hpp"
#include "htr/model.hpp"

namespace htr {

// ---------------------------------------------------------------------------
// Schedules and state
// ---------------------------------------------------------------------------

// min(r_max, r0 + (e/E)(r_max - r0))
inline double synthetic_ratio(idx epoch, idx total_epochs, double r0 = 0.1, double rmax = 0.4) {
  require(total_epochs >= 1, "synthetic_ratio: total_epochs must be >= 1");
  require(epoch >= 0 && epoch <= total_epochs, "synthetic_ratio: epoch out of range");
  double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return std::min(rmax, r0 + t * (rmax - r0));
}

struct EarlyStopState {
  double best = std::numeric_limits<double>::infinity();
  int patience = 0;
  int patience_limit = 10;
  double min_improvement = 0.001;
  bool stopped = false;
};

// Patience resets only when the loss beats the best by strictly more than
// the improvement threshold; the best value itself tracks any improvement so
// the retained checkpoint is the true optimum. The first observation sets
// the baseline and counts toward patience, so a flat loss curve stops after
// exactly patience_limit epochs.
inline bool early_stop_update(EarlyStopState& s, double val_loss) {
  if (s.best != std::numeric_limits<double>::infinity() && s.best - val_loss > s.min_improvement)
    s.patience = 0;
  else
    s.patience++;
  if (val_loss < s.best) s.best = val_loss;
  if (s.patience >= s.patience_limit) s.stopped = true;
  return s.stopped;
}

constexpr int kMaxStage = 5;

struct TrainState {
  idx epoch = 0;
  idx total_epochs = 1;
  int stage = 1;  // 1..5, non-decreasing
  double stage_threshold = 0.75;
  double stage_delta = 0.05;
  double r0 = 0.1, rmax = 0.4;
  double synth_ratio = 0.1;
  LossWeights weights;
  EarlyStopState early;
  std::uint64_t seed = 0;
  std::map<std::string, double> task_cer;  // previous epoch, per source tag
};

// Adaptive curriculum progression: advance while validation performance
// exceeds the threshold; stage 5 is absorbing.
inline void acp_step(TrainState& s, double performance) {
  require(std::isfinite(performance), "acp_step: non-finite performance");
  if (s.stage >= kMaxStage) return;
  if (performance > s.stage_threshold) {
    s.stage++;
    s.stage_threshold += s.stage_delta;
  }
}

// ---------------------------------------------------------------------------
// Multi-task weighting
// ---------------------------------------------------------------------------

struct TaskWeights {
  std::map<std::string, double> lambda;  // nonnegative, sums to 1
};

// Harder tasks (higher validation CER) get proportionally larger weights;
// with no history or under the uniform flag every task weighs the same.
inline TaskWeights reweight_tasks(const std::vector<std::string>& tasks,
                                  const std::map<std::string, double>& val_cer,
                                  bool uniform = false) {
  require(!tasks.empty(), "reweight_tasks: no tasks");
  TaskWeights w;
  double total = 0;
  for (const std::string& t : tasks) {
    double v = uniform ? 1.0 : (val_cer.count(t) ? val_cer.at(t) : 0.0);
    w.lambda[t] = v;
    total += v;
  }
  if (total <= 0) {
    for (auto& [t, v] : w.lambda) v = 1.0 / static_cast<double>(tasks.size());
    return w;
  }
  for (auto& [t, v] : w.lambda) v /= total;
  return w;
}

inline double multitask_loss(const std::vector<double>& losses, const std::vector<double>& lambda) {
  require(losses.size() == lambda.size(), "multitask_loss: size mismatch");
  double total_w = 0, acc = 0;
  for (size_t i = 0; i < losses.size(); i++) {
    require(lambda[i] >= 0, "multitask_loss: negative weight");
    total_w += lambda[i];
    acc += lambda[i] * losses[i];
  }
  require(total_w > 0, "multitask_loss: all-zero weights");
  return acc;
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with global-norm clipping
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  idx step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <typename T>
void optimizer_step(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
                    AdamState<T>& opt, double lr, double clip = 5.0) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (idx i = 0; i < g.numel(); i++) sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
  if (!std::isfinite(sq)) {
    Warnings::global().bump("skipped_nonfinite_grad_steps");
    return;
  }
  double norm = std::sqrt(sq);
  double scale = (clip > 0 && norm > clip) ? clip / norm : 1.0;

  opt.step++;
  double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (const auto& [name, g] : grads) {
    Tensor<T>& p = params.at(name);
    require(p.shape == g.shape, "optimizer_step: grad shape mismatch for " + name);
    auto mit = opt.m.find(name);
    if (mit == opt.m.end()) {
      opt.m.emplace(name, Tensor<T>(p.shape));
      opt.v.emplace(name, Tensor<T>(p.shape));
    }
    Tensor<T>& m = opt.m.at(name);
    Tensor<T>& v = opt.v.at(name);
    for (idx i = 0; i < p.numel(); i++) {
      double gi = static_cast<double>(g[i]) * scale;
      double mi = opt.beta1 * static_cast<double>(m[i]) + (1 - opt.beta1) * gi;
      double vi = opt.beta2 * static_cast<double>(v[i]) + (1 - opt.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(static_cast<double>(p[i]) -
                            lr * (mi / bc1) / (std::sqrt(vi / bc2) + opt.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Dataset container and curriculum selection
// ---------------------------------------------------------------------------

struct Dataset {
  Charset charset;
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> val;
  std::vector<SampleRecord> test;
  std::vector<SampleRecord> synth_pool;
};

struct TrainingOptions {
  idx batch_size = 16;
  double lr = 1e-3;
  double clip = 5.0;
  double tau = 2.0;
  bool uniform_task_weights = false;
  idx stage1_len_cap = 3;  // short clean synthetic
  idx stage23_len_cap = 4;  // before long sequences enter at stage 4
  AugmentSpec augment;
};

struct EpochPlan {
  std::vector<idx> train_ids;  // positive: index into train; negative: ~index into synth_pool
  bool augment_on = false;
};

inline idx text_len(const SampleRecord& r) { return static_cast<idx>(utf8_decode(r.text).size()); }

// Stage pools: 1 = short clean synthetic, 2 = + real data and the synthetic
// ratio ramp, 3 = + augmentation, 4 = + long sequences, 5 = full mixture.
inline EpochPlan update_curriculum(const Dataset& data, const TrainState& state,
                                   const TrainingOptions& opts) {
  EpochPlan plan;
  plan.augment_on = state.stage >= 3;
  idx cap = state.stage == 1 ? opts.stage1_len_cap
                             : (state.stage <= 3 ? opts.stage23_len_cap
                                                 : std::numeric_limits<idx>::max());
  std::vector<idx> synth_ids, real_ids;
  std::vector<double> synth_w, real_w;
  for (size_t i = 0; i < data.synth_pool.size(); i++)
    if (text_len(data.synth_pool[i]) <= cap) {
      synth_ids.push_back(static_cast<idx>(i));
      synth_w.push_back(data.charset.sample_weight(data.synth_pool[i].text));
    }
  if (state.stage >= 2)
    for (size_t i = 0; i < data.train.size(); i++)
      if (text_len(data.train[i]) <= cap) {
        real_ids.push_back(static_cast<idx>(i));
        real_w.push_back(data.charset.sample_weight(data.train[i].text));
      }

  Rng rng(hash_mix(state.seed, hash_mix(0xC0DE, static_cast<std::uint64_t>(state.epoch))));
  if (state.stage == 1) {
    require(!synth_ids.empty(), "curriculum: stage 1 has no short synthetic samples");
    // keep the epoch budget at full corpus size even while the pool is small
    idx n_draws = std::max<idx>(static_cast<idx>(synth_ids.size()),
                                static_cast<idx>(data.train.size()));
    for (idx k = 0; k < n_draws; k++)
      plan.train_ids.push_back(~synth_ids[static_cast<size_t>(draw_weighted_index(synth_w, rng))]);
    return plan;
  }
  require(!real_ids.empty(), "curriculum: no real samples pass the stage filter");
  idx n_real = static_cast<idx>(real_ids.size());
  idx n_synth = std::min<idx>(synthetic_count(n_real, state.synth_ratio),
                              static_cast<idx>(synth_ids.size()));
  for (idx k = 0; k < n_real; k++)
    plan.train_ids.push_back(real_ids[static_cast<size_t>(draw_weighted_index(real_w, rng))]);
  for (idx k = 0; k < n_synth; k++)
    plan.train_ids.push_back(~synth_ids[static_cast<size_t>(draw_weighted_index(synth_w, rng))]);
  // deterministic shuffle
  for (size_t i = plan.train_ids.size(); i > 1; i--)
    std::swap(plan.train_ids[i - 1], plan.train_ids[static_cast<size_t>(rng.below(static_cast<idx>(i)))]);
  return plan;
}

// ---------------------------------------------------------------------------
// Evaluation helper (greedy decoding over a sample list)
// ---------------------------------------------------------------------------

template <typename T>
struct EvalOutcome {
  EvalReport report;
  double mean_ctc_loss = 0;
  std::map<std::string, double> per_task_cer;
  std::vector<std::string> refs, hyps;
};

template <typename T>
EvalOutcome<T> evaluate_model(const ModelConfig& cfg, ParameterStore<T>& store,
                              const std::vector<SampleRecord>& samples, const Charset& cs,
                              idx batch_size = 16) {
  require(!samples.empty(), "evaluate_model: empty sample list");
  EvalOutcome<T> out;
  std::map<std::string, std::pair<idx, idx>> task_edits;  // edits, chars
  double loss_acc = 0;
  idx loss_count = 0;
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size)) {
    size_t end = std::min(samples.size(), start + static_cast<size_t>(batch_size));
    std::vector<idx> ids;
    for (size_t i = start; i < end; i++) ids.push_back(static_cast<idx>(i));
    Tape<T> tape;
    ParamBinder<T> bind(tape, store, false);
    Var images = tape.constant(batch_images<T>(samples, ids));
    auto fwd = model_forward(tape, cfg, bind, images, false);
    for (size_t i = start; i < end; i++) {
      Var lv = tape.pick_batch(fwd.logits, static_cast<idx>(i - start));
      Tensor<T> lat = tape.value(tape.log_softmax_lastdim(lv));
      std::string hyp = decode_text_greedy(lat, cs);
      out.refs.push_back(samples[i].text);
      out.hyps.push_back(hyp);
      auto target = cs.tokenize(samples[i].text);
      if (ctc_min_frames(target) <= lat.shape[0]) {
        loss_acc += -ctc_log_prob(lat, target);
        loss_count++;
      }
      idx d = edit_distance(samples[i].text, hyp);
      auto& te = task_edits[samples[i].source];
      te.first += d;
      te.second += static_cast<idx>(utf8_decode(samples[i].text).size());
    }
  }
  out.report = metrics(out.refs, out.hyps);
  out.mean_ctc_loss = loss_count > 0 ? loss_acc / static_cast<double>(loss_count) : 0.0;
  for (const auto& [task, ec] : task_edits)
    out.per_task_cer[task] = ec.second > 0 ? static_cast<double>(ec.first) / static_cast<double>(ec.second) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Unified training epoch
// ---------------------------------------------------------------------------

struct EpochMetrics {
  idx epoch = 0;
  int stage = 1;
  double r_s = 0;
  LossWeights weights;
  double mean_ctc = 0, mean_kd = 0, mean_aux = 0, mean_total = 0;
  double val_loss = 0, val_cer = 0, val_wer = 0, val_ser = 0;
  idx skipped_samples = 0;
  double seconds = 0;
};

// One epoch of the unified framework: curriculum data selection, teacher and
// student forward passes, the four-component loss under the epoch's weight
// schedule, multi-task combination across source tags, and an Adam step per
// batch. Pass a null teacher to train without distillation (gamma = 0).
template <typename T>
EpochMetrics utf_epoch(const ModelConfig& model_cfg, ParameterStore<T>& model,
                       const ModelConfig* teacher_cfg, ParameterStore<T>* teacher,
                       Dataset& data, TrainState& state, AdamState<T>& opt,
                       const TrainingOptions& opts) {
  auto t0 = std::chrono::steady_clock::now();
  EpochMetrics em;
  em.epoch = state.epoch;
  state.weights = weight_schedule(state.epoch, state.total_epochs);
  if (!teacher) state.weights.gamma = 0.0;
  state.synth_ratio = synthetic_ratio(state.epoch, state.total_epochs, state.r0, state.rmax);
  em.stage = state.stage;
  em.r_s = state.synth_ratio;
  em.weights = state.weights;

  EpochPlan plan = update_curriculum(data, state, opts);
  std::vector<std::string> tasks;
  {
    std::set<std::string> seen;
    for (idx id : plan.train_ids) {
      const SampleRecord& r = id >= 0 ? data.train[static_cast<size_t>(id)]
                                      : data.synth_pool[static_cast<size_t>(~id)];
      if (seen.insert(r.source).second) tasks.push_back(r.source);
    }
  }
  TaskWeights task_w = reweight_tasks(tasks, state.task_cer, opts.uniform_task_weights);

  double acc_ctc = 0, acc_kd = 0, acc_aux = 0, acc_total = 0;
  idx n_batches = 0;
  for (size_t start = 0; start < plan.train_ids.size(); start += static_cast<size_t>(opts.batch_size)) {
    size_t end = std::min(plan.train_ids.size(), start + static_cast<size_t>(opts.batch_size));
    idx B = static_cast<idx>(end - start);

    // assemble the batch: stage-gated augmentation with per-sample seeds
    Tensor<T> images(Shape{B, 1, model_cfg.img_h, model_cfg.img_w});
    std::vector<std::vector<int>> targets(static_cast<size_t>(B));
    std::vector<std::string> sources(static_cast<size_t>(B));
    for (idx b = 0; b < B; b++) {
      idx id = plan.train_ids[start + static_cast<size_t>(b)];
      const SampleRecord& r = id >= 0 ? data.train[static_cast<size_t>(id)]
                                      : data.synth_pool[static_cast<size_t>(~id)];
      Image img = r.image;
      if (plan.augment_on)
        img = augment(img, opts.augment,
                      hash_mix(state.seed, hash_mix(static_cast<std::uint64_t>(state.epoch),
                                                    static_cast<std::uint64_t>(start + static_cast<size_t>(b)))));
      require(img.h == model_cfg.img_h && img.w == model_cfg.img_w, "utf_epoch: sample size mismatch");
      for (idx i = 0; i < img.h * img.w; i++)
        images[(b * img.h * img.w) + i] = static_cast<T>(img.pix[static_cast<size_t>(i)]);
      targets[static_cast<size_t>(b)] = data.charset.tokenize(r.text);
      sources[static_cast<size_t>(b)] = r.source;
    }

    Tape<T> tape;
    ParamBinder<T> bind(tape, model, true);
    Var image_var = tape.constant(images);
    auto fwd = model_forward(tape, model_cfg, bind, image_var, true);

    ForwardResult<T> teacher_fwd;
    std::unique_ptr<ParamBinder<T>> teacher_bind;
    if (teacher) {
      teacher_bind = std::make_unique<ParamBinder<T>>(tape, *teacher, false);
      teacher_fwd = model_forward(tape, *teacher_cfg, *teacher_bind, image_var, false);
    }

    // per-sample losses, grouped by source tag
    std::map<std::string, std::vector<Var>> task_losses;
    idx used = 0;
    for (idx b = 0; b < B; b++) {
      const std::vector<int>& target = targets[static_cast<size_t>(b)];
      Var logits_b = tape.pick_batch(fwd.logits, b);
      if (ctc_min_frames(target) > tape.value(logits_b).shape[0]) {
        Warnings::global().bump("skipped_infeasible_targets");
        em.skipped_samples++;
        continue;
      }
      std::vector<int> alignment;
      Var ctc = ctc_loss_op(tape, logits_b, target, &alignment);

      Var kd;
      if (teacher && state.weights.gamma != 0.0) {
        Tensor<T> zt = tape.value(tape.pick_batch(teacher_fwd.logits, b));
        kd = kd_loss_op(tape, zt, logits_b, opts.tau);
      }

      Var aux;
      if (state.weights.delta != 0.0) {
        Var aux_b = tape.pick_batch(fwd.aux_logits, b);
        const Tensor<T>& av = tape.value(aux_b);
        Tensor<T> onehot(av.shape);
        for (idx t = 0; t < av.shape[0]; t++)
          onehot.at2(t, static_cast<idx>(alignment[static_cast<size_t>(t)])) = T(1);
        aux = ce_loss_op(tape, tape.softmax_lastdim(aux_b), onehot);
      }

      Var ce;
      if (state.weights.beta != 0.0) {
        const Tensor<T>& lv = tape.value(logits_b);
        Tensor<T> onehot(lv.shape);
        for (idx t = 0; t < lv.shape[0]; t++)
          onehot.at2(t, static_cast<idx>(alignment[static_cast<size_t>(t)])) = T(1);
        ce = ce_loss_op(tape, tape.softmax_lastdim(logits_b), onehot);
      }

      Var total = total_loss_op(tape, ctc, ce, kd, aux, state.weights);
      task_losses[sources[static_cast<size_t>(b)]].push_back(total);
      used++;
      acc_ctc += static_cast<double>(tape.value(ctc)[0]);
      if (kd.valid()) acc_kd += static_cast<double>(tape.value(kd)[0]);
      if (aux.valid()) acc_aux += static_cast<double>(tape.value(aux)[0]);
    }
    if (used == 0) continue;

    // multi-task combination over the tasks present in this batch
    Var batch_loss;
    double lambda_total = 0;
    for (const auto& [task, losses] : task_losses) lambda_total += task_w.lambda.at(task);
    for (const auto& [task, losses] : task_losses) {
      Var task_mean;
      for (Var l : losses) task_mean = task_mean.valid() ? tape.add(task_mean, l) : l;
      task_mean = tape.scale(task_mean, 1.0 / static_cast<double>(losses.size()));
      Var weighted = tape.scale(task_mean, task_w.lambda.at(task) / lambda_total);
      batch_loss = batch_loss.valid() ? tape.add(batch_loss, weighted) : weighted;
    }
    double bl = static_cast<double>(tape.value(batch_loss)[0]);
    if (!std::isfinite(bl)) {
      std::string ids;
      for (size_t i = start; i < end; i++)
        ids += (ids.empty() ? "" : ",") + std::to_string(plan.train_ids[i]);
      fail("utf_epoch: non-finite loss at epoch " + std::to_string(state.epoch) + " batch " +
           std::to_string(n_batches) + " (sample ids " + ids + ")");
    }
    acc_total += bl;
    n_batches++;

    tape.backward(batch_loss);
    optimizer_step(model, bind.collect_grads(), opt, opts.lr, opts.clip);
  }

  idx used_total = static_cast<idx>(plan.train_ids.size()) - em.skipped_samples;
  em.mean_ctc = used_total > 0 ? acc_ctc / static_cast<double>(used_total) : 0;
  em.mean_kd = used_total > 0 ? acc_kd / static_cast<double>(used_total) : 0;
  em.mean_aux = used_total > 0 ? acc_aux / static_cast<double>(used_total) : 0;
  em.mean_total = n_batches > 0 ? acc_total / static_cast<double>(n_batches) : 0;

  // validation, curriculum and early-stop bookkeeping
  EvalOutcome<T> val = evaluate_model(model_cfg, model, data.val, data.charset, opts.batch_size);
  em.val_loss = val.mean_ctc_loss;
  em.val_cer = val.report.cer;
  em.val_wer = val.report.wer;
  em.val_ser = val.report.ser;
  state.task_cer = val.per_task_cer;
  // the curriculum gate watches performance at the current stage's
  // difficulty; from stage 4 on that is the full validation set
  double stage_cer = val.report.cer;
  idx stage_cap = state.stage == 1 ? opts.stage1_len_cap
                                   : (state.stage <= 3 ? opts.stage23_len_cap
                                                       : std::numeric_limits<idx>::max());
  if (state.stage < 4) {
    idx edits = 0, chars = 0;
    for (size_t i = 0; i < val.refs.size(); i++) {
      idx len = static_cast<idx>(utf8_decode(val.refs[i]).size());
      if (len > stage_cap) continue;
      edits += edit_distance(val.refs[i], val.hyps[i]);
      chars += len;
    }
    if (chars > 0) stage_cer = static_cast<double>(edits) / static_cast<double>(chars);
  }
  acp_step(state, 1.0 - stage_cer);
  early_stop_update(state.early, val.mean_ctc_loss);
  state.epoch++;

  em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return em;
}

// Teacher-less epoch: trains with gamma = 0 (no distillation).
template <typename T>
EpochMetrics utf_epoch(const ModelConfig& model_cfg, ParameterStore<T>& model, Dataset& data,
                       TrainState& state, AdamState<T>& opt, const TrainingOptions& opts) {
  return utf_epoch<T>(model_cfg, model, nullptr, static_cast<ParameterStore<T>*>(nullptr), data,
                      state, opt, opts);
}

// One training-log line: flat JSON with fixed float formatting so identical
// runs produce identical text (timing excluded from that contract).
inline std::string format_log_line(const EpochMetrics& em) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"epoch\":%lld,\"stage\":%d,\"r_s\":%.6f,\"alpha\":%.6f,\"beta\":%.6f,"
                "\"gamma\":%.6f,\"delta\":%.6f,\"ctc\":%.6f,\"kd\":%.6f,\"aux\":%.6f,"
                "\"total\":%.6f,\"val_loss\":%.6f,\"val_cer\":%.6f,\"val_wer\":%.6f,"
                "\"val_ser\":%.6f,\"skipped\":%lld,\"seconds\":%.3f}",
                static_cast<long long>(em.epoch), em.stage, em.r_s, em.weights.alpha,
                em.weights.beta, em.weights.gamma, em.weights.delta, em.mean_ctc, em.mean_kd,
                em.mean_aux, em.mean_total, em.val_loss, em.val_cer, em.val_wer, em.val_ser,
                static_cast<long long>(em.skipped_samples), em.seconds);
  return buf;
}

struct RunResult {
  std::vector<EpochMetrics> epochs;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double final_val_cer = 1.0;
};

// Epoch loop with early stopping and best-checkpoint retention.
template <typename T>
RunResult run_training(const ModelConfig& model_cfg, ParameterStore<T>& model,
                       const ModelConfig* teacher_cfg, ParameterStore<T>* teacher, Dataset& data,
                       TrainState& state, const TrainingOptions& opts, std::ostream* log,
                       const std::string& best_checkpoint_path = "") {
  AdamState<T> opt;
  RunResult out;
  ParameterStore<T> best = model;
  while (state.epoch < state.total_epochs && !state.early.stopped) {
    EpochMetrics em = utf_epoch(model_cfg, model, teacher_cfg, teacher, data, state, opt, opts);
    if (log) (*log) << format_log_line(em) << "\n";
    if (em.val_loss < out.best_val_loss) {
      out.best_val_loss = em.val_loss;
      best = model;
      if (!best_checkpoint_path.empty()) save_checkpoint(best, best_checkpoint_path);
    }
    out.final_val_cer = em.val_cer;
    out.epochs.push_back(std::move(em));
  }
  model = best;  // the retained model is the best-validation one
  return out;
}

template <typename T>
RunResult run_training(const ModelConfig& model_cfg, ParameterStore<T>& model, Dataset& data,
                       TrainState& state, const TrainingOptions& opts, std::ostream* log,
                       const std::string& best_checkpoint_path = "") {
  return run_training<T>(model_cfg, model, nullptr, static_cast<ParameterStore<T>*>(nullptr), data,
                         state, opts, log, best_checkpoint_path);
}

}  // namespace htr
