#include "icfg/sft.hpp"

#include <sstream>

#include <nlohmann/json.hpp>

namespace icfg {

SftResult train_sft(const std::vector<SftExample>& examples, Net<float> init, const SftConfig& cfg) {
  cfg.validate();
  if (examples.empty()) throw std::invalid_argument("train_sft: empty dataset");

  SftResult result;
  result.net = std::move(init);
  Rng rng(cfg.seed);

  Net<float>& net = result.net;
  Params<float> last_good = net.params;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<CotItem<float>> cot_items;
    std::vector<FlowItem<float>> flow_items;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const SftExample& ex = examples[static_cast<size_t>(rng.uniform_int(static_cast<int>(examples.size())))];
      const bool drop = rng.bernoulli(cfg.cot_drop_prob);
      FlowItem<float> fi;
      fi.prompt = ex.prompt;
      fi.x0 = ex.x0;
      if (!drop) {
        fi.trace_tokens = ex.trace_tokens;
        cot_items.push_back({ex.prompt, ex.trace_tokens});
      }
      flow_items.push_back(std::move(fi));
    }

    SftStepMetrics m;
    m.step = step;
    try {
      Params<float> grads = make_params<float>(net.cfg);
      m.cot_loss = cot_items.empty() ? 0.0 : cot_loss(net, cot_items, &grads);
      if (cfg.loss_weight_cot != 1.0) {
        // cot gradients were accumulated at weight 1; rescale before adding flow
        Params<float> scaled = make_params<float>(net.cfg);
        axpy_params(scaled, static_cast<float>(cfg.loss_weight_cot), grads);
        grads = std::move(scaled);
      }
      m.flow_loss = flow_loss(net, flow_items, rng.fork(), &grads);
      axpy_params(net.params, static_cast<float>(-cfg.learning_rate), grads);
      if (!params_finite(net.params)) throw NumericalFault("train_sft: non-finite parameters");
    } catch (const NumericalFault&) {
      net.params = last_good;
      result.aborted = true;
      break;
    }
    last_good = net.params;
    result.metrics.push_back(m);
  }
  return result;
}

std::string sft_metrics_jsonl(const std::vector<SftStepMetrics>& metrics) {
  std::ostringstream out;
  for (const auto& m : metrics) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["cot_loss"] = m.cot_loss;
    j["flow_loss"] = m.flow_loss;
    out << j.dump() << "\n";
  }
  return out.str();
}

}  // namespace icfg
