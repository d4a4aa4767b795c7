#include <doctest.h>

#include "icfg/sft.hpp"

using namespace icfg;

namespace {

struct Fixture {
  World world{WorldConfig{}};
  Tokenizer tok{world};

  ModelConfig model_config() const {
    ModelConfig cfg;
    cfg.dim = world.config().dim;
    cfg.vocab_size = tok.size();
    return cfg;
  }

  std::vector<SftExample> make_dataset(int n, uint64_t seed) const {
    Rng rng(seed);
    std::vector<SftExample> out;
    for (int i = 0; i < n; ++i) {
      const TaskKind kind = kTaskKinds[static_cast<size_t>(rng.uniform_int(8))];
      const TaskInstance task = world.sample_task(kind, rng);
      SftExample ex;
      ex.prompt = tokenize_prompt(prompt_of(task), tok);
      ex.trace_tokens = tok.encode(render_trace(task.gt_trace));
      ex.x0 = task.gt_image;
      out.push_back(std::move(ex));
    }
    return out;
  }
};

}  // namespace

TEST_CASE("cot_drop_prob 1 leaves every reasoning-head tensor untouched") {
  Fixture f;
  const auto dataset = f.make_dataset(6, 41);
  auto init = Net<float>::random_init(f.model_config(), 7);
  SftConfig cfg;
  cfg.steps = 20;
  cfg.cot_drop_prob = 1.0;
  cfg.seed = 3;
  const Params<float> before = init.params;
  const SftResult r = train_sft(dataset, std::move(init), cfg);
  CHECK_FALSE(r.aborted);
  CHECK(r.net.params.head_w1 == before.head_w1);
  CHECK(r.net.params.head_b1 == before.head_b1);
  CHECK(r.net.params.head_w2 == before.head_w2);
  CHECK(r.net.params.head_b2 == before.head_b2);
  CHECK(r.net.params.head_wo == before.head_wo);
  CHECK(r.net.params.head_bo == before.head_bo);
  CHECK(r.net.params.out_pos == before.out_pos);
  // while the flow path kept training
  CHECK_FALSE(r.net.params.vel_w1 == before.vel_w1);
}

TEST_CASE("four-record overfit run drops the combined loss below 10% of its start") {
  Fixture f;
  const auto dataset = f.make_dataset(4, 42);
  auto init = Net<float>::random_init(f.model_config(), 8);
  SftConfig cfg;
  cfg.steps = 500;
  cfg.batch_size = 4;
  cfg.seed = 4;
  const SftResult r = train_sft(dataset, std::move(init), cfg);
  REQUIRE_FALSE(r.aborted);
  REQUIRE(r.metrics.size() == 500);
  auto window_mean = [&](size_t begin, size_t end) {
    double s = 0;
    for (size_t i = begin; i < end; ++i) {
      s += r.metrics[i].cot_loss * cfg.loss_weight_cot + r.metrics[i].flow_loss;
    }
    return s / static_cast<double>(end - begin);
  };
  const double initial = window_mean(0, 50);
  const double final = window_mean(450, 500);
  CHECK(final < 0.1 * initial);
}

TEST_CASE("identical seeds and config give bit-identical final parameters") {
  Fixture f;
  const auto dataset = f.make_dataset(5, 43);
  SftConfig cfg;
  cfg.steps = 40;
  cfg.seed = 11;
  const auto r1 = train_sft(dataset, Net<float>::random_init(f.model_config(), 9), cfg);
  const auto r2 = train_sft(dataset, Net<float>::random_init(f.model_config(), 9), cfg);
  CHECK(r1.net.params == r2.net.params);
  CHECK(sft_metrics_jsonl(r1.metrics) == sft_metrics_jsonl(r2.metrics));
}

TEST_CASE("metrics log is monotone in step with no gaps") {
  Fixture f;
  const auto dataset = f.make_dataset(3, 44);
  SftConfig cfg;
  cfg.steps = 25;
  const SftResult r = train_sft(dataset, Net<float>::random_init(f.model_config(), 10), cfg);
  REQUIRE(r.metrics.size() == 25);
  for (size_t i = 0; i < r.metrics.size(); ++i) {
    CHECK(r.metrics[i].step == static_cast<int>(i));
  }
}
