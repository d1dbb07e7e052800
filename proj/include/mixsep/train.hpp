// Training orchestration for PIT, PIT-DM, MixIT, MixPIT, and MixCycle:
// per-method gradient steps, Adam with global-norm clipping, epoch loop
// with early stopping, and the MixPIT warm start for MixCycle.
#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixsep/data.hpp"
#include "mixsep/metrics.hpp"
#include "mixsep/model.hpp"

namespace mixsep::train {

enum class Method { kPit, kPitDm, kMixit, kMixpit, kMixcycle };

inline Method method_from_string(const std::string& s) {
  if (s == "pit") return Method::kPit;
  if (s == "pit_dm") return Method::kPitDm;
  if (s == "mixit") return Method::kMixit;
  if (s == "mixpit") return Method::kMixpit;
  if (s == "mixcycle") return Method::kMixcycle;
  throw std::invalid_argument("unknown method: " + s);
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kPit: return "pit";
    case Method::kPitDm: return "pit_dm";
    case Method::kMixit: return "mixit";
    case Method::kMixpit: return "mixpit";
    case Method::kMixcycle: return "mixcycle";
  }
  return "?";
}

struct TrainConfig {
  Method method = Method::kPit;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 5.0;  // global L2 over all gradients
  int max_epochs = 100;
  int early_stop_patience = 10;
  int mixpit_warmstart_epochs = 50;  // MixCycle warm start, "I"
  unsigned seed = 1;
  std::size_t segment_length = 24000;
  LossConfig loss;
  int n_threads = 0;  // 0 = hardware concurrency

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (grad_clip_norm <= 0) throw std::invalid_argument("TrainConfig: grad_clip_norm must be positive");
    if (mixpit_warmstart_epochs < 0) throw std::invalid_argument("TrainConfig: warm start must be >= 0");
    loss.validate();
  }
};

struct AdamState {
  std::map<std::string, std::pair<Arr, Arr>> moments;  // name -> (m, v)
  long t = 0;
};

struct TrainState {
  ModelParameters params;
  AdamState opt;
  std::mt19937 rng;
  int epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  int patience_count = 0;
};

// Per-parameter gradients aligned with params.tensors order.
using Grads = std::vector<Arr>;

inline Grads zero_grads(const ModelParameters& p) {
  Grads g;
  g.reserve(p.tensors.size());
  for (const auto& [n, a] : p.tensors) g.push_back(Arr::Zero(a.rows(), a.cols()));
  return g;
}

inline double global_grad_norm(const Grads& g) {
  double sq = 0.0;
  for (const auto& a : g) sq += (a * a).sum();
  return std::sqrt(sq);
}

// Scales gradients so the global L2 norm does not exceed max_norm.
inline double clip_gradients(Grads& g, double max_norm) {
  double norm = global_grad_norm(g);
  if (norm > max_norm) {
    double s = max_norm / norm;
    for (auto& a : g) a *= s;
  }
  return norm;
}

inline void adam_step(ModelParameters& params, AdamState& opt, const Grads& grads, const TrainConfig& cfg) {
  ++opt.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(opt.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(opt.t));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& [name, w] = params.tensors[i];
    auto it = opt.moments.find(name);
    if (it == opt.moments.end())
      it = opt.moments.emplace(name, std::make_pair(Arr::Zero(w.rows(), w.cols()),
                                                    Arr::Zero(w.rows(), w.cols()))).first;
    Arr& m = it->second.first;
    Arr& v = it->second.second;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grads[i];
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grads[i] * grads[i];
    w -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.adam_eps);
  }
  ++params.step;
  if (!params.finite()) throw std::runtime_error("adam_step: parameters became non-finite");
}

// ---- loss graphs on the tape ----------------------------------------------

// PIT: permutation chosen on forward values, gradient flows through the
// chosen branch only (standard subgradient of the min).
inline std::pair<ad::Var, int> pit_loss_on_tape(ad::Tape& tape, std::span<const double> ref1,
                                                std::span<const double> ref2, ad::Var out1, ad::Var out2,
                                                const LossConfig& cfg) {
  auto pick = metrics::pit_loss(ref1, ref2, ad::as_span(tape, out1), ad::as_span(tape, out2), cfg);
  ad::Var a = pick.permutation == 0 ? out1 : out2;
  ad::Var b = pick.permutation == 0 ? out2 : out1;
  return {ad::add(ad::neg_snr(ref1, a, cfg), ad::neg_snr(ref2, b, cfg)), pick.permutation};
}

inline std::pair<ad::Var, std::array<int, 4>> mixit_loss_on_tape(ad::Tape& tape,
                                                                 std::span<const double> mix1,
                                                                 std::span<const double> mix2,
                                                                 const std::vector<ad::Var>& out,
                                                                 const LossConfig& cfg) {
  std::array<std::span<const double>, 4> spans;
  for (int i = 0; i < 4; ++i) spans[std::size_t(i)] = ad::as_span(tape, out[std::size_t(i)]);
  auto pick = metrics::mixit_loss(mix1, mix2, spans, cfg);
  const std::size_t n = mix1.size();
  ad::Var groups[2] = {ad::Var{}, ad::Var{}};
  for (int g = 0; g < 2; ++g) {
    ad::Var acc{};
    for (int o = 0; o < 4; ++o) {
      if (pick.assignment[std::size_t(o)] != g + 1) continue;
      acc = acc.valid() ? ad::add(acc, out[std::size_t(o)]) : out[std::size_t(o)];
    }
    if (!acc.valid()) acc = tape.constant(Arr::Zero(1, Eigen::Index(n)));
    groups[g] = acc;
  }
  return {ad::add(ad::neg_snr(mix1, groups[0], cfg), ad::neg_snr(mix2, groups[1], cfg)), pick.assignment};
}

// ---- batched steps ---------------------------------------------------------

namespace detail {

inline int thread_count(const TrainConfig& cfg, std::size_t items) {
  int n = cfg.n_threads > 0 ? cfg.n_threads : int(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  return int(std::min<std::size_t>(std::size_t(n), items));
}

// Runs fn(item) on contiguous chunks across threads; each call returns the
// item loss and accumulates into the per-thread gradient buffer. Reduction
// order is fixed, so results are deterministic for a fixed thread count.
template <typename Fn>
inline double parallel_batch(const TrainConfig& cfg, std::size_t items, const ModelParameters& params,
                             Grads& out_grads, Fn&& fn) {
  const int nt = thread_count(cfg, items);
  std::vector<Grads> grads(static_cast<std::size_t>(nt));
  std::vector<double> losses(items, 0.0);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nt));
  std::vector<std::thread> threads;
  for (int tid = 0; tid < nt; ++tid) {
    threads.emplace_back([&, tid]() {
      try {
        grads[std::size_t(tid)] = zero_grads(params);
        for (std::size_t i = std::size_t(tid); i < items; i += std::size_t(nt))
          losses[i] = fn(i, grads[std::size_t(tid)]);
      } catch (...) {
        errors[std::size_t(tid)] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  out_grads = zero_grads(params);
  for (int tid = 0; tid < nt; ++tid)
    for (std::size_t i = 0; i < out_grads.size(); ++i) out_grads[i] += grads[std::size_t(tid)][i];
  const double inv = 1.0 / double(items);
  for (auto& a : out_grads) a *= inv;
  double mean = 0.0;
  for (double l : losses) mean += l;
  return mean * inv;
}

// Backward pass for one item's scalar loss; adds parameter gradients into acc.
inline void accumulate_item_grads(ad::Tape& tape, const model::TapedParams& w, ad::Var loss, Grads& acc) {
  tape.backward(loss);
  for (std::size_t i = 0; i < w.vars.size(); ++i) {
    const auto& [name, var] = w.vars[i];
    if (tape.requires_grad(var)) {
      try {
        acc[i] += tape.grad(var);
      } catch (const std::logic_error&) {
        // parameter unused by this loss; gradient is zero
      }
    }
  }
}

}  // namespace detail

struct StepStats {
  double mean_loss = 0.0;
  double grad_norm_pre_clip = 0.0;
};

inline StepStats train_step_supervised(TrainState& state, const data::SupervisedBatch& batch,
                                       const TrainConfig& cfg) {
  Grads grads;
  double loss = detail::parallel_batch(cfg, batch.mixtures.size(), state.params, grads,
                                       [&](std::size_t i, Grads& acc) {
                                         ad::Tape tape;
                                         auto w = model::put_on_tape(tape, state.params);
                                         auto fwd = model::forward(tape, w, state.params.config, batch.mixtures[i]);
                                         auto [l, perm] = pit_loss_on_tape(
                                             tape, batch.references[i][0].samples, batch.references[i][1].samples,
                                             fwd.estimates[0], fwd.estimates[1], cfg.loss);
                                         detail::accumulate_item_grads(tape, w, l, acc);
                                         return tape.value(l)(0, 0);
                                       });
  if (!std::isfinite(loss)) throw std::runtime_error("train_step: non-finite loss at step " +
                                                     std::to_string(state.params.step));
  StepStats st;
  st.mean_loss = loss;
  st.grad_norm_pre_clip = clip_gradients(grads, cfg.grad_clip_norm);
  adam_step(state.params, state.opt, grads, cfg);
  return st;
}

inline StepStats train_step_mixpit(TrainState& state, const data::MoMBatch& batch, const TrainConfig& cfg) {
  Grads grads;
  double loss = detail::parallel_batch(cfg, batch.mom.size(), state.params, grads,
                                       [&](std::size_t i, Grads& acc) {
                                         ad::Tape tape;
                                         auto w = model::put_on_tape(tape, state.params);
                                         auto fwd = model::forward(tape, w, state.params.config, batch.mom[i]);
                                         auto [l, perm] = pit_loss_on_tape(
                                             tape, batch.mix_1[i].samples, batch.mix_2[i].samples,
                                             fwd.estimates[0], fwd.estimates[1], cfg.loss);
                                         detail::accumulate_item_grads(tape, w, l, acc);
                                         return tape.value(l)(0, 0);
                                       });
  if (!std::isfinite(loss)) throw std::runtime_error("train_step: non-finite loss at step " +
                                                     std::to_string(state.params.step));
  StepStats st;
  st.mean_loss = loss;
  st.grad_norm_pre_clip = clip_gradients(grads, cfg.grad_clip_norm);
  adam_step(state.params, state.opt, grads, cfg);
  return st;
}

inline StepStats train_step_mixit(TrainState& state, const data::MoMBatch& batch, const TrainConfig& cfg) {
  if (state.params.config.n_outputs != 4)
    throw std::runtime_error("train_step_mixit: model must have 4 outputs");
  Grads grads;
  double loss = detail::parallel_batch(cfg, batch.mom.size(), state.params, grads,
                                       [&](std::size_t i, Grads& acc) {
                                         ad::Tape tape;
                                         auto w = model::put_on_tape(tape, state.params);
                                         auto fwd = model::forward(tape, w, state.params.config, batch.mom[i]);
                                         auto [l, a] = mixit_loss_on_tape(tape, batch.mix_1[i].samples,
                                                                          batch.mix_2[i].samples,
                                                                          fwd.estimates, cfg.loss);
                                         detail::accumulate_item_grads(tape, w, l, acc);
                                         return tape.value(l)(0, 0);
                                       });
  if (!std::isfinite(loss)) throw std::runtime_error("train_step: non-finite loss at step " +
                                                     std::to_string(state.params.step));
  StepStats st;
  st.mean_loss = loss;
  st.grad_norm_pre_clip = clip_gradients(grads, cfg.grad_clip_norm);
  adam_step(state.params, state.opt, grads, cfg);
  return st;
}

enum class RemixChoice { kOpt1, kOpt2 };

inline RemixChoice draw_remix_choice(std::mt19937& rng) {
  return std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? RemixChoice::kOpt1 : RemixChoice::kOpt2;
}

// One MixCycle step: teacher (pre-update parameters, no gradients) separates
// both mixtures, estimates are remixed across mixtures per the drawn option,
// and the student takes a PIT step against the detached teacher estimates.
inline StepStats train_step_mixcycle(TrainState& state, const data::MixturePairBatch& batch,
                                     const TrainConfig& cfg) {
  const std::size_t pairs = batch.mix_1.size();
  // Remix options drawn up front so the parallel schedule cannot reorder them.
  std::vector<RemixChoice> choices(pairs);
  for (auto& c : choices) c = draw_remix_choice(state.rng);

  Grads grads;
  double loss = detail::parallel_batch(
      cfg, pairs, state.params, grads, [&](std::size_t i, Grads& acc) {
        // Teacher pass with theta^(tau-1): parameters before this update.
        ad::Tape teacher_tape(false);
        auto tw = model::put_on_tape(teacher_tape, state.params);
        auto t1 = model::forward(teacher_tape, tw, state.params.config, batch.mix_1[i]);
        auto t2 = model::forward(teacher_tape, tw, state.params.config, batch.mix_2[i]);
        auto wave = [&](ad::Var v) {
          const Arr& a = teacher_tape.value(v);
          return AudioSegment(std::vector<double>(a.data(), a.data() + a.size()),
                              state.params.config.sample_rate);
        };
        AudioSegment si = wave(t1.estimates[0]), sj = wave(t1.estimates[1]);
        AudioSegment sk = wave(t2.estimates[0]), sl = wave(t2.estimates[1]);

        // Each artificial mixture pairs estimates from the two different
        // input mixtures.
        AudioSegment ref_1a, ref_1b, ref_2a, ref_2b;
        if (choices[i] == RemixChoice::kOpt1) {
          ref_1a = si; ref_1b = sk;
          ref_2a = sj; ref_2b = sl;
        } else {
          ref_1a = sj; ref_1b = sk;
          ref_2a = si; ref_2b = sl;
        }
        AudioSegment remix_1 = ref_1a + ref_1b;
        AudioSegment remix_2 = ref_2a + ref_2b;

        ad::Tape tape;
        auto w = model::put_on_tape(tape, state.params);
        auto s1 = model::forward(tape, w, state.params.config, remix_1);
        auto s2 = model::forward(tape, w, state.params.config, remix_2);
        auto [l1, p1] = pit_loss_on_tape(tape, ref_1a.samples, ref_1b.samples, s1.estimates[0],
                                         s1.estimates[1], cfg.loss);
        auto [l2, p2] = pit_loss_on_tape(tape, ref_2a.samples, ref_2b.samples, s2.estimates[0],
                                         s2.estimates[1], cfg.loss);
        ad::Var l = ad::add(l1, l2);
        detail::accumulate_item_grads(tape, w, l, acc);
        return tape.value(l)(0, 0);
      });
  if (!std::isfinite(loss)) throw std::runtime_error("train_step: non-finite loss at step " +
                                                     std::to_string(state.params.step));
  StepStats st;
  st.mean_loss = loss;
  st.grad_norm_pre_clip = clip_gradients(grads, cfg.grad_clip_norm);
  adam_step(state.params, state.opt, grads, cfg);
  return st;
}

// ---- validation ------------------------------------------------------------

// The method's own loss on held-out data, with a fixed sampling seed so the
// score is comparable across epochs. MixCycle validates with a teacher
// frozen at the current parameters.
inline double validation_loss(const ModelParameters& params, Method method, const data::Manifest& val,
                              const TrainConfig& cfg) {
  std::mt19937 rng(cfg.seed ^ 0x9e3779b9u);
  data::SegmentSampler sampler{cfg.segment_length};
  const std::size_t batch = std::min<std::size_t>(cfg.batch_size, std::max<std::size_t>(val.size(), 1));
  double total = 0.0;
  std::size_t count = 0;

  auto forward2 = [&](const AudioSegment& mix) { return model::separate(params, mix); };

  switch (method) {
    case Method::kPit:
    case Method::kPitDm: {
      auto b = data::make_supervised_batch(val, sampler, batch, rng);
      for (std::size_t i = 0; i < b.mixtures.size(); ++i) {
        auto est = forward2(b.mixtures[i]);
        total += metrics::pit_loss(b.references[i][0].samples, b.references[i][1].samples,
                                   est[0].samples, est[1].samples, cfg.loss).loss;
        ++count;
      }
      break;
    }
    case Method::kMixit: {
      auto b = data::make_mom_batch(val, sampler, batch, rng);
      for (std::size_t i = 0; i < b.mom.size(); ++i) {
        auto est = forward2(b.mom[i]);
        std::array<std::span<const double>, 4> spans;
        for (int o = 0; o < 4; ++o) spans[std::size_t(o)] = est[std::size_t(o)].samples;
        total += metrics::mixit_loss(b.mix_1[i].samples, b.mix_2[i].samples, spans, cfg.loss).loss;
        ++count;
      }
      break;
    }
    case Method::kMixpit: {
      auto b = data::make_mom_batch(val, sampler, batch, rng);
      for (std::size_t i = 0; i < b.mom.size(); ++i) {
        auto est = forward2(b.mom[i]);
        total += metrics::mixpit_loss(b.mix_1[i].samples, b.mix_2[i].samples, est[0].samples,
                                      est[1].samples, cfg.loss).loss;
        ++count;
      }
      break;
    }
    case Method::kMixcycle: {
      auto b = data::make_pair_batch(val, sampler, std::max<std::size_t>(1, batch / 2), rng);
      for (std::size_t i = 0; i < b.mix_1.size(); ++i) {
        auto e1 = forward2(b.mix_1[i]);
        auto e2 = forward2(b.mix_2[i]);
        bool opt1 = std::uniform_int_distribution<int>(0, 1)(rng) == 0;
        const AudioSegment& ra = opt1 ? e1[0] : e1[1];
        const AudioSegment& rb = e2[0];
        const AudioSegment& rc = opt1 ? e1[1] : e1[0];
        const AudioSegment& rd = e2[1];
        auto o1 = forward2(ra + rb);
        auto o2 = forward2(rc + rd);
        total += metrics::mixcycle_loss(ra.samples, rb.samples, rc.samples, rd.samples, o1[0].samples,
                                        o1[1].samples, o2[0].samples, o2[1].samples, cfg.loss);
        ++count;
      }
      break;
    }
  }
  return count ? total / double(count) : 0.0;
}

// ---- epoch loop ------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  std::string method_phase;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_seconds = 0.0;
  double step_seconds_mean = 0.0;
};

struct TrainOutcome {
  ModelParameters best_params;
  double best_val = 0.0;
  int best_epoch = 0;
  std::vector<EpochLog> log;
};

inline void check_method_data(Method method, const data::Manifest& train_manifest) {
  if (train_manifest.size() == 0) throw std::runtime_error("training manifest is empty");
  bool supervised = method == Method::kPit || method == Method::kPitDm;
  if (supervised && !train_manifest.all_have_sources())
    throw std::runtime_error("supervised method requires references on every record");
  if (!supervised && train_manifest.size() < 2)
    throw std::runtime_error("unsupervised methods need at least 2 mixtures");
}

inline TrainOutcome run_training(const TrainConfig& cfg, const data::Manifest& train_manifest,
                                 const data::Manifest& val_manifest, const std::string& run_dir = "",
                                 const ModelConfig* model_cfg = nullptr,
                                 const model::Checkpoint* resume = nullptr) {
  cfg.validate();
  check_method_data(cfg.method, train_manifest);

  TrainState state;
  state.rng.seed(cfg.seed);
  if (resume != nullptr) {
    state.params = resume->params;
    state.opt.t = resume->adam_t;
    for (const auto& [n, mv] : resume->adam_state) state.opt.moments[n] = mv;
    std::istringstream is(resume->rng_state);
    is >> state.rng;
  } else {
    ModelConfig mc = model_cfg ? *model_cfg : ModelConfig{};
    if (cfg.method == Method::kMixit) mc.n_outputs = 4;
    state.params = model::init(mc, state.rng);
  }

  namespace fs = std::filesystem;
  std::ofstream log_file;
  if (!run_dir.empty()) {
    fs::create_directories(run_dir);
    log_file.open(fs::path(run_dir) / "log.jsonl", std::ios::app);
  }

  data::SegmentSampler sampler{cfg.segment_length};
  TrainOutcome out;
  out.best_params = state.params;
  out.best_val = std::numeric_limits<double>::infinity();

  // Records consumed per step: PIT uses one per item, MoM methods two; a
  // MixCycle step uses batch_size/2 pairs, i.e. batch_size records.
  const std::size_t consumed =
      (cfg.method == Method::kPit || cfg.method == Method::kMixcycle) ? cfg.batch_size
                                                                      : 2 * cfg.batch_size;
  const int steps_per_epoch = std::max<int>(1, int(train_manifest.size() / consumed));

  bool warm_phase_prev = cfg.method == Method::kMixcycle && cfg.mixpit_warmstart_epochs > 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    state.epoch = epoch;
    const bool warm = cfg.method == Method::kMixcycle && epoch <= cfg.mixpit_warmstart_epochs;
    // The loss scale changes at the warm-start boundary; best/patience
    // restart there while the optimizer state carries over.
    if (warm_phase_prev && !warm) {
      state.best_val = std::numeric_limits<double>::infinity();
      state.patience_count = 0;
      out.best_val = std::numeric_limits<double>::infinity();
    }
    warm_phase_prev = warm;

    auto t0 = std::chrono::steady_clock::now();
    double train_loss = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      StepStats st;
      switch (cfg.method) {
        case Method::kPit:
          st = train_step_supervised(state, data::make_supervised_batch(train_manifest, sampler,
                                                                        cfg.batch_size, state.rng), cfg);
          break;
        case Method::kPitDm:
          st = train_step_supervised(state, data::make_dynamic_mix_batch(train_manifest, sampler,
                                                                         cfg.batch_size, state.rng), cfg);
          break;
        case Method::kMixit:
          st = train_step_mixit(state, data::make_mom_batch(train_manifest, sampler, cfg.batch_size,
                                                            state.rng), cfg);
          break;
        case Method::kMixpit:
          st = train_step_mixpit(state, data::make_mom_batch(train_manifest, sampler, cfg.batch_size,
                                                             state.rng), cfg);
          break;
        case Method::kMixcycle:
          if (warm) {
            st = train_step_mixpit(state, data::make_mom_batch(train_manifest, sampler, cfg.batch_size,
                                                               state.rng), cfg);
          } else {
            st = train_step_mixcycle(state, data::make_pair_batch(
                                                train_manifest, sampler,
                                                std::max<std::size_t>(1, cfg.batch_size / 2), state.rng),
                                     cfg);
          }
          break;
      }
      train_loss += st.mean_loss;
    }
    train_loss /= steps_per_epoch;
    auto t1 = std::chrono::steady_clock::now();

    Method val_method = cfg.method == Method::kMixcycle && warm ? Method::kMixpit : cfg.method;
    double val_loss = validation_loss(state.params, val_method, val_manifest, cfg);

    EpochLog el;
    el.epoch = epoch;
    el.method_phase = warm ? "mixpit(warmstart)" : to_string(cfg.method);
    el.train_loss = train_loss;
    el.val_loss = val_loss;
    el.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    el.step_seconds_mean = el.wall_seconds / steps_per_epoch;
    out.log.push_back(el);
    if (log_file) {
      nlohmann::json j = {{"epoch", el.epoch},         {"method_phase", el.method_phase},
                          {"train_loss", el.train_loss}, {"val_loss", el.val_loss},
                          {"wall_seconds", el.wall_seconds},
                          {"step_seconds_mean", el.step_seconds_mean}};
      log_file << j.dump() << "\n" << std::flush;
    }

    if (!run_dir.empty()) {
      model::Checkpoint ck;
      ck.params = state.params;
      for (const auto& [n, mv] : state.opt.moments) ck.adam_state[n] = mv;
      ck.adam_t = state.opt.t;
      std::ostringstream os;
      os << state.rng;
      ck.rng_state = os.str();
      ck.metadata = {{"epoch", epoch}, {"val_loss", val_loss}, {"method", to_string(cfg.method)}};
      model::save_checkpoint((fs::path(run_dir) / "last.ckpt").string(), ck);
      if (val_loss < state.best_val) {
        model::save_checkpoint((fs::path(run_dir) / "best.ckpt").string(), ck);
        std::ofstream best((fs::path(run_dir) / "best.json"));
        best << ck.metadata.dump(2) << "\n";
      }
    }
    if (val_loss < state.best_val) {
      state.best_val = val_loss;
      state.patience_count = 0;
      out.best_params = state.params;
      out.best_val = val_loss;
      out.best_epoch = epoch;
    } else {
      ++state.patience_count;
      // Warm-start epochs never trigger early stopping on their own.
      if (!warm && state.patience_count > cfg.early_stop_patience) break;
    }
  }
  return out;
}

}  // namespace mixsep::train
