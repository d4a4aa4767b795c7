#ifndef ICFG_SFT_HPP_
#define ICFG_SFT_HPP_

#include <functional>
#include <string>
#include <vector>

#include "icfg/model.hpp"

namespace icfg {

struct SftConfig {
  double learning_rate = 1e-2;
  int steps = 2000;
  int batch_size = 8;
  double cot_drop_prob = 0.5;   // probability an example trains without its trace
  double loss_weight_cot = 1.0;
  uint64_t seed = 1;

  void validate() const {
    if (learning_rate <= 0) throw std::invalid_argument("SftConfig: learning_rate must be > 0");
    if (steps < 0 || batch_size < 1) throw std::invalid_argument("SftConfig: bad steps/batch");
    if (cot_drop_prob < 0 || cot_drop_prob > 1) {
      throw std::invalid_argument("SftConfig: cot_drop_prob must be in [0,1]");
    }
    if (loss_weight_cot < 0) throw std::invalid_argument("SftConfig: loss_weight_cot must be >= 0");
  }
};

// one training record: prompt, target trace, target image
struct SftExample {
  TokenizedPrompt prompt;
  std::vector<int> trace_tokens;
  ImageVec x0;
};

struct SftStepMetrics {
  int step = 0;
  double cot_loss = 0;
  double flow_loss = 0;
};

struct SftResult {
  Net<float> net;
  std::vector<SftStepMetrics> metrics;
  bool aborted = false;  // NumericalFault hit; net holds the last good state
};

// Joint SGD on loss_weight_cot * cot_loss + flow_loss with per-example
// trace dropping. Deterministic given (examples order, init, config).
SftResult train_sft(const std::vector<SftExample>& examples, Net<float> init, const SftConfig& cfg);

// JSONL metrics line: {"step":..,"cot_loss":..,"flow_loss":..}
std::string sft_metrics_jsonl(const std::vector<SftStepMetrics>& metrics);

}  // namespace icfg

#endif  // ICFG_SFT_HPP_
