#include "icfg/align.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace icfg {

std::vector<double> compute_advantages(const std::vector<double>& rewards, double eps) {
  const size_t n = rewards.size();
  if (n == 0) return {};
  double mean = 0;
  for (double r : rewards) {
    if (!std::isfinite(r)) throw std::invalid_argument("compute_advantages: non-finite reward");
    mean += r;
  }
  mean /= static_cast<double>(n);
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(n);
  const double denom = std::sqrt(var) + eps;
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) {
    out[i] = denom == 0.0 ? 0.0 : (rewards[i] - mean) / denom;
  }
  return out;
}

AlignResult train_align(Net<float> net, const std::vector<AlignPrompt>& suite,
                        const DualEncoder& encoder, const Tokenizer& tok, const AlignConfig& cfg) {
  cfg.validate();
  if (suite.empty()) throw std::invalid_argument("train_align: empty prompt suite");

  AlignResult result;
  result.net = std::move(net);
  Rng rng(cfg.seed);
  Params<float> last_good = result.net.params;

  for (int step = 0; step < cfg.align_steps; ++step) {
    const AlignPrompt& p = suite[static_cast<size_t>(rng.uniform_int(static_cast<int>(suite.size())))];
    AlignStepMetrics m;
    m.step = step;
    try {
      Rng group_rng = rng.fork(hash_combine(0xa119, static_cast<uint64_t>(step)));
      const RolloutGroup<float> group =
          rollout_group(result.net, p.prompt, p.num_refs, encoder, tok, cfg, group_rng);
      double mean = 0;
      for (const auto& mem : group.members) mean += mem.reward;
      mean /= static_cast<double>(group.members.size());
      double var = 0;
      for (const auto& mem : group.members) var += (mem.reward - mean) * (mem.reward - mean);
      var /= static_cast<double>(group.members.size());
      m.mean_reward = mean;
      m.reward_std = std::sqrt(var);
      const GrpoStats stats = grpo_update(result.net, group, cfg);
      m.clip_fraction = stats.clip_fraction;
    } catch (const NumericalFault&) {
      result.net.params = last_good;
      result.aborted = true;
      break;
    }
    last_good = result.net.params;
    result.metrics.push_back(m);
  }
  return result;
}

std::string align_metrics_jsonl(const std::vector<AlignStepMetrics>& metrics) {
  std::ostringstream out;
  for (const auto& m : metrics) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["mean_reward"] = m.mean_reward;
    j["reward_std"] = m.reward_std;
    j["clip_fraction"] = m.clip_fraction;
    out << j.dump() << "\n";
  }
  return out.str();
}

}  // namespace icfg
