#ifndef ICFG_ALIGN_HPP_
#define ICFG_ALIGN_HPP_

#include <string>
#include <vector>

#include "icfg/embed.hpp"
#include "icfg/model.hpp"

namespace icfg {

struct AlignConfig {
  int group_size = 8;
  int align_steps = 200;
  double learning_rate = 1e-3;
  double clip_eps = 0.2;
  double sigma = 0.3;          // SDE noise scale during rollouts
  int rollout_steps = 10;      // K
  bool rid_enabled = true;     // distinct trace per group member
  double std_guard = 1e-8;     // epsilon in the advantage denominator
  double trace_temperature = 1.0;
  bool shared_noise = false;   // diagnostic: one noise stream for every member
  uint64_t seed = 1;

  void validate() const {
    if (group_size < 2) throw std::invalid_argument("AlignConfig: group_size must be >= 2");
    if (clip_eps <= 0) throw std::invalid_argument("AlignConfig: clip_eps must be > 0");
    if (sigma < 0) throw std::invalid_argument("AlignConfig: sigma must be >= 0");
    if (std_guard <= 0) throw std::invalid_argument("AlignConfig: std_guard must be > 0");
    if (rollout_steps < 1) throw std::invalid_argument("AlignConfig: rollout_steps must be >= 1");
    if (align_steps < 0 || learning_rate < 0) throw std::invalid_argument("AlignConfig: bad step/lr");
  }
};

template <typename T>
struct RolloutMember {
  SampledTrace trace;
  GenResult gen;      // trajectory, behavior log-densities, final image
  double reward = 0;
  double advantage = 0;
};

template <typename T>
struct RolloutGroup {
  TokenizedPrompt prompt;
  int num_refs = 0;
  std::vector<RolloutMember<T>> members;
};

// A_i = (r_i - mean) / (std_pop + eps)
std::vector<double> compute_advantages(const std::vector<double>& rewards, double eps);

// One prompt's G rollouts. With RID each member samples its own trace at
// trace_temperature; otherwise one trace is shared (noise stays independent
// unless shared_noise). Unparseable traces keep the empty-caption fallback
// and are never dropped.
template <typename T>
RolloutGroup<T> rollout_group(const Net<T>& net, const TokenizedPrompt& prompt, int num_refs,
                              const DualEncoder& encoder, const Tokenizer& tok,
                              const AlignConfig& cfg, Rng& rng) {
  cfg.validate();
  RolloutGroup<T> group;
  group.prompt = prompt;
  group.num_refs = num_refs;

  SampledTrace shared;
  if (!cfg.rid_enabled) {
    Rng trng = rng.fork(0x7717);
    shared = sample_trace(net, prompt, cfg.trace_temperature, trng, tok, num_refs);
  }
  Rng shared_gen_rng = rng.fork(0x90153);

  for (int m = 0; m < cfg.group_size; ++m) {
    RolloutMember<T> member;
    if (cfg.rid_enabled) {
      Rng trng = rng.fork(hash_combine(0x7718, static_cast<uint64_t>(m)));
      member.trace = sample_trace(net, prompt, cfg.trace_temperature, trng, tok, num_refs);
    } else {
      member.trace = shared;
    }
    Rng grng = cfg.shared_noise ? shared_gen_rng
                                : rng.fork(hash_combine(0x90154, static_cast<uint64_t>(m)));
    member.gen = generate(net, prompt, &member.trace.tokens, cfg.rollout_steps, SampleMode::Sde,
                          cfg.sigma, grng);
    member.reward = encoder.surrogate_reward(member.gen.image, member.trace.trace.caption);
    group.members.push_back(std::move(member));
  }

  std::vector<double> rewards;
  for (const auto& m : group.members) rewards.push_back(m.reward);
  const std::vector<double> adv = compute_advantages(rewards, cfg.std_guard);
  for (size_t i = 0; i < group.members.size(); ++i) group.members[i].advantage = adv[i];
  return group;
}

struct GrpoStats {
  double objective = 0;
  double clip_fraction = 0;
  double mean_ratio = 0;
  double max_abs_ratio_minus_one = 0;  // 0 exactly on the first post-rollout update
};

// Clipped-ratio objective over every stored SDE transition:
//   mean over members/steps of min(rho*A, clip(rho, 1-eps, 1+eps)*A),
// rho = exp(logp_new - logp_old). Gradients flow into the velocity net and
// the conditioning encoder only; reasoning-head tensors stay untouched.
template <typename T>
GrpoStats grpo_objective_grad(const Net<T>& net, const RolloutGroup<T>& group,
                              const AlignConfig& cfg, Params<T>* grads) {
  const int D = net.cfg.dim;
  const int K = cfg.rollout_steps;
  const double dt = 1.0 / static_cast<double>(K);
  const double sd = cfg.sigma * std::sqrt(dt);
  const double lo = 1.0 - cfg.clip_eps, hi = 1.0 + cfg.clip_eps;
  const long terms = static_cast<long>(group.members.size()) * static_cast<long>(K);

  GrpoStats stats;
  long clipped = 0;
  MlpCache<T> cache;
  for (const auto& member : group.members) {
    const double A = member.advantage;
    CtxCache<T> ctx =
        net.encode_context(group.prompt.refs, group.prompt.instr_tokens, &member.trace.tokens);
    std::vector<T> gctx(static_cast<size_t>(net.cfg.ctx_dim), T(0));
    bool ctx_used = false;

    for (int i = 0; i < K; ++i) {
      const double t = static_cast<double>(K - i) / static_cast<double>(K);
      const auto& x = member.gen.states[static_cast<size_t>(i)];
      const auto& x_next = member.gen.states[static_cast<size_t>(i) + 1];
      std::vector<T> xt(x.begin(), x.end());
      net.velocity(xt.data(), static_cast<T>(t), ctx.ctx, cache);

      double logp_new = 0;
      std::vector<double> mean(static_cast<size_t>(D));
      if (sd > 0) {
        for (int d = 0; d < D; ++d) {
          mean[static_cast<size_t>(d)] =
              static_cast<double>(xt[static_cast<size_t>(d)]) -
              dt * static_cast<double>(cache.out[static_cast<size_t>(d)]);
          logp_new += gaussian_logpdf(x_next[static_cast<size_t>(d)], mean[static_cast<size_t>(d)], sd);
        }
      }
      const double logp_old = member.gen.step_logp[static_cast<size_t>(i)];
      const double ratio = std::exp(logp_new - logp_old);
      if (!std::isfinite(ratio)) throw NumericalFault("grpo: non-finite ratio");
      stats.mean_ratio += ratio / static_cast<double>(terms);
      stats.max_abs_ratio_minus_one = std::max(stats.max_abs_ratio_minus_one, std::abs(ratio - 1.0));

      const double unclipped = ratio * A;
      const double clipped_v = std::min(std::max(ratio, lo), hi) * A;
      stats.objective += std::min(unclipped, clipped_v) / static_cast<double>(terms);
      const bool clip_binds = (A > 0 && ratio > hi) || (A < 0 && ratio < lo);
      if (clip_binds) ++clipped;

      if (grads && sd > 0 && A != 0 && !clip_binds) {
        // d objective / d logp_new = ratio * A on the active branch
        const double w = ratio * A / static_cast<double>(terms);
        std::vector<T> gv(static_cast<size_t>(D));
        for (int d = 0; d < D; ++d) {
          const double dlogp_dmean =
              (x_next[static_cast<size_t>(d)] - mean[static_cast<size_t>(d)]) / (sd * sd);
          gv[static_cast<size_t>(d)] = static_cast<T>(w * (-dt) * dlogp_dmean);
        }
        net.velocity_backward(cache, gv, *grads, gctx);
        ctx_used = true;
      }
    }
    if (grads && ctx_used) net.ctx_backward(ctx, gctx, *grads);
  }
  stats.clip_fraction = static_cast<double>(clipped) / static_cast<double>(terms);
  return stats;
}

// One ascent step on the clipped objective. Reasoning-head tensors receive
// no gradient by construction.
template <typename T>
GrpoStats grpo_update(Net<T>& net, const RolloutGroup<T>& group, const AlignConfig& cfg) {
  Params<T> grads = make_params<T>(net.cfg);
  const GrpoStats stats = grpo_objective_grad(net, group, cfg, &grads);
  axpy_params(net.params, static_cast<T>(cfg.learning_rate), grads);
  if (!params_finite(net.params)) throw NumericalFault("grpo_update: non-finite parameters");
  return stats;
}

struct AlignStepMetrics {
  int step = 0;
  double mean_reward = 0;
  double reward_std = 0;
  double clip_fraction = 0;
};

struct AlignResult {
  Net<float> net;
  std::vector<AlignStepMetrics> metrics;
  bool aborted = false;
};

struct AlignPrompt {
  TokenizedPrompt prompt;
  int num_refs = 0;
};

AlignResult train_align(Net<float> net, const std::vector<AlignPrompt>& suite,
                        const DualEncoder& encoder, const Tokenizer& tok, const AlignConfig& cfg);

std::string align_metrics_jsonl(const std::vector<AlignStepMetrics>& metrics);

}  // namespace icfg

#endif  // ICFG_ALIGN_HPP_
