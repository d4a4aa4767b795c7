#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "icfg/checkpoint.hpp"
#include "icfg/model.hpp"

using namespace icfg;

namespace {

ModelConfig micro_config(Rng& rng) {
  ModelConfig cfg;
  cfg.dim = 6 + rng.uniform_int(4);
  cfg.vocab_size = 10 + rng.uniform_int(6);
  cfg.tok_dim = 4 + rng.uniform_int(4);
  cfg.ctx_dim = 6 + rng.uniform_int(4);
  cfg.pos_dim = 3 + rng.uniform_int(3);
  cfg.head_hidden = 8;
  cfg.vel_hidden = 8;
  cfg.max_refs = 4;
  cfg.max_trace_tokens = 16;
  return cfg;
}

TokenizedPrompt random_prompt(const ModelConfig& cfg, Rng& rng, int refs) {
  TokenizedPrompt p;
  for (int i = 0; i < refs; ++i) {
    ImageVec img;
    img.values.resize(static_cast<size_t>(cfg.dim));
    for (auto& v : img.values) v = rng.normal();
    p.refs.push_back(std::move(img));
  }
  const int len = 2 + rng.uniform_int(5);
  for (int i = 0; i < len; ++i) p.instr_tokens.push_back(3 + rng.uniform_int(cfg.vocab_size - 3));
  return p;
}

std::vector<int> random_tokens(const ModelConfig& cfg, Rng& rng, int len) {
  std::vector<int> out;
  for (int i = 0; i < len; ++i) out.push_back(3 + rng.uniform_int(cfg.vocab_size - 3));
  return out;
}

// |a-b| <= rtol*max(|a|,|b|) + atol
bool close(double a, double b, double rtol, double atol) {
  return std::abs(a - b) <= rtol * std::max(std::abs(a), std::abs(b)) + atol;
}

}  // namespace

TEST_CASE("encode_context is deterministic and input-sensitive") {
  Rng seed_rng(91);
  const ModelConfig cfg = micro_config(seed_rng);
  const auto net = Net<double>::random_init(cfg, 5);
  Rng rng(7);
  int trace_differs = 0, perm_differs = 0;
  const int trials = 100;
  for (int i = 0; i < trials; ++i) {
    const TokenizedPrompt p = random_prompt(cfg, rng, 2 + rng.uniform_int(2));
    const std::vector<int> trace = random_tokens(cfg, rng, 4);
    const auto a = net.encode_context(p.refs, p.instr_tokens, &trace);
    const auto b = net.encode_context(p.refs, p.instr_tokens, &trace);
    CHECK(a.ctx == b.ctx);

    const auto no_trace = net.encode_context(p.refs, p.instr_tokens, nullptr);
    if (no_trace.ctx != a.ctx) ++trace_differs;

    auto swapped = p.refs;
    std::swap(swapped[0], swapped[1]);
    const auto perm = net.encode_context(swapped, p.instr_tokens, &trace);
    if (perm.ctx != a.ctx) ++perm_differs;
  }
  CHECK(trace_differs >= 99);
  CHECK(perm_differs >= 99);
}

TEST_CASE("encode_context rejects over-long inputs") {
  Rng seed_rng(92);
  const ModelConfig cfg = micro_config(seed_rng);
  const auto net = Net<double>::random_init(cfg, 6);
  Rng rng(8);
  TokenizedPrompt p = random_prompt(cfg, rng, cfg.max_refs + 1);
  CHECK_THROWS_AS(net.encode_context(p.refs, p.instr_tokens, nullptr), std::invalid_argument);
  TokenizedPrompt q = random_prompt(cfg, rng, 1);
  q.instr_tokens.assign(static_cast<size_t>(cfg.max_trace_tokens) + 1, 3);
  CHECK_THROWS_AS(net.encode_context(q.refs, q.instr_tokens, nullptr), std::invalid_argument);
}

TEST_CASE("cot_loss equals ln V at uniform logits") {
  Rng seed_rng(93);
  ModelConfig cfg = micro_config(seed_rng);
  auto net = Net<double>::random_init(cfg, 7);
  net.params.head_wo.zero();
  net.params.head_bo.zero();
  Rng rng(9);
  std::vector<CotItem<double>> items;
  for (int i = 0; i < 3; ++i) {
    items.push_back({random_prompt(cfg, rng, 1 + rng.uniform_int(3)), random_tokens(cfg, rng, 5)});
  }
  CHECK(cot_loss(net, items) ==
        doctest::Approx(std::log(static_cast<double>(cfg.vocab_size))).epsilon(1e-3));
}

TEST_CASE("gradients match central finite differences on random micro-configs") {
  // the central numerical property: exact reverse-mode gradients, f64 path
  Rng seed_rng(20260811);
  const int n_configs = 20;
  for (int c = 0; c < n_configs; ++c) {
    const ModelConfig cfg = micro_config(seed_rng);
    auto net = Net<double>::random_init(cfg, seed_rng.u64());
    Rng rng(seed_rng.u64());

    // --- cot path
    {
      std::vector<CotItem<double>> items{
          {random_prompt(cfg, rng, 1 + rng.uniform_int(3)), random_tokens(cfg, rng, 4)}};
      Params<double> grads = make_params<double>(cfg);
      const double base = cot_loss(net, items, &grads);
      CHECK(std::isfinite(base));
      const std::vector<double> ga = flatten_params(grads);
      std::vector<double> theta = flatten_params(net.params);
      const double h = 1e-4;
      for (size_t i = 0; i < theta.size(); ++i) {
        const double save = theta[i];
        theta[i] = save + h;
        unflatten_params(net.params, theta);
        const double up = cot_loss(net, items);
        theta[i] = save - h;
        unflatten_params(net.params, theta);
        const double dn = cot_loss(net, items);
        theta[i] = save;
        const double fd = (up - dn) / (2 * h);
        if (!close(fd, ga[i], 1e-3, 1e-7)) {
          CAPTURE(c);
          CAPTURE(i);
          CAPTURE(fd);
          CAPTURE(ga[i]);
          REQUIRE(close(fd, ga[i], 1e-3, 1e-7));
        }
      }
      unflatten_params(net.params, theta);
    }
    // --- flow path
    {
      std::vector<FlowItem<double>> items;
      FlowItem<double> it;
      it.prompt = random_prompt(cfg, rng, 1 + rng.uniform_int(3));
      if (rng.bernoulli(0.5)) it.trace_tokens = random_tokens(cfg, rng, 4);
      it.x0.values.resize(static_cast<size_t>(cfg.dim));
      for (auto& v : it.x0.values) v = rng.normal();
      items.push_back(it);

      Rng noise(777 + static_cast<uint64_t>(c));
      Params<double> grads = make_params<double>(cfg);
      const double base = flow_loss(net, items, noise, &grads);
      CHECK(std::isfinite(base));
      const std::vector<double> ga = flatten_params(grads);
      std::vector<double> theta = flatten_params(net.params);
      const double h = 1e-4;
      for (size_t i = 0; i < theta.size(); ++i) {
        const double save = theta[i];
        theta[i] = save + h;
        unflatten_params(net.params, theta);
        const double up = flow_loss(net, items, noise);
        theta[i] = save - h;
        unflatten_params(net.params, theta);
        const double dn = flow_loss(net, items, noise);
        theta[i] = save;
        const double fd = (up - dn) / (2 * h);
        if (!close(fd, ga[i], 1e-3, 1e-7)) {
          CAPTURE(c);
          CAPTURE(i);
          REQUIRE(close(fd, ga[i], 1e-3, 1e-7));
        }
      }
      unflatten_params(net.params, theta);
    }
  }
}

TEST_CASE("flow interpolation endpoints and the worked example") {
  const double x0[2] = {0, 0};
  const double x1[2] = {1, 2};
  double xt[2], v[2];
  flow_interpolate(x0, x1, 0.5, 2, xt, v);
  CHECK(xt[0] == doctest::Approx(0.5));
  CHECK(xt[1] == doctest::Approx(1.0));
  CHECK(v[0] == doctest::Approx(1.0));
  CHECK(v[1] == doctest::Approx(2.0));
  flow_interpolate(x0, x1, 0.0, 2, xt, v);
  CHECK(xt[0] == 0.0);
  CHECK(xt[1] == 0.0);
  flow_interpolate(x0, x1, 1.0, 2, xt, v);
  CHECK(xt[0] == 1.0);
  CHECK(xt[1] == 2.0);
}

TEST_CASE("flow_loss equals the replayed hand computation and hits zero on matched outputs") {
  Rng seed_rng(95);
  const ModelConfig cfg = micro_config(seed_rng);
  const auto net = Net<double>::random_init(cfg, 11);
  Rng rng(12);
  std::vector<FlowItem<double>> items;
  FlowItem<double> it;
  it.prompt = random_prompt(cfg, rng, 1);
  it.x0.values.resize(static_cast<size_t>(cfg.dim));
  for (auto& v : it.x0.values) v = rng.normal();
  items.push_back(it);

  Rng noise(4242);
  const double loss = flow_loss(net, items, noise);

  // replay the same stream by hand
  Rng replay(4242);
  const double t = replay.uniform();
  std::vector<double> x1(static_cast<size_t>(cfg.dim));
  for (auto& n : x1) n = replay.normal();
  std::vector<double> xt(static_cast<size_t>(cfg.dim)), v(static_cast<size_t>(cfg.dim));
  flow_interpolate(it.x0.values.data(), x1.data(), t, cfg.dim, xt.data(), v.data());
  const auto ctx = net.encode_context(it.prompt.refs, it.prompt.instr_tokens, nullptr);
  MlpCache<double> cache;
  net.velocity(xt.data(), t, ctx.ctx, cache);
  double expect = 0;
  for (int d = 0; d < cfg.dim; ++d) {
    const double r = cache.out[static_cast<size_t>(d)] - v[static_cast<size_t>(d)];
    expect += r * r;
  }
  CHECK(loss == doctest::Approx(expect).epsilon(1e-12));

  // a prediction equal to the target leaves zero residual
  double zero = 0;
  for (int d = 0; d < cfg.dim; ++d) {
    const double r = v[static_cast<size_t>(d)] - v[static_cast<size_t>(d)];
    zero += r * r;
  }
  CHECK(zero == 0.0);
}

TEST_CASE("sample_trace is greedy-deterministic at temperature zero") {
  WorldConfig wcfg;
  World world(wcfg);
  Tokenizer tok(world);
  ModelConfig cfg;
  cfg.dim = wcfg.dim;
  cfg.vocab_size = tok.size();
  const auto net = Net<float>::random_init(cfg, 13);
  Rng rng(14);
  const TaskInstance task = world.sample_task(TaskKind::SubjectDriven, rng);
  const TokenizedPrompt p = tokenize_prompt(prompt_of(task), tok);
  Rng r1(1), r2(2);
  const SampledTrace a = sample_trace(net, p, 0.0, r1, tok, 1);
  const SampledTrace b = sample_trace(net, p, 0.0, r2, tok, 1);
  CHECK(a.tokens == b.tokens);
  CHECK(a.raw_text == b.raw_text);
}

TEST_CASE("sampled per-token log-probs match teacher-forced recomputation") {
  WorldConfig wcfg;
  World world(wcfg);
  Tokenizer tok(world);
  ModelConfig cfg;
  cfg.dim = wcfg.dim;
  cfg.vocab_size = tok.size();
  const auto net = Net<float>::random_init(cfg, 15);
  Rng rng(16);
  for (int i = 0; i < 10; ++i) {
    const TaskInstance task = world.sample_task(TaskKind::RefSceneEdit, rng);
    const TokenizedPrompt p = tokenize_prompt(prompt_of(task), tok);
    for (double temp : {1.0, 0.7, 0.0}) {
      Rng srng(100 + static_cast<uint64_t>(i));
      const SampledTrace s = sample_trace(net, p, temp, srng, tok, 2);
      const std::vector<double> again = trace_logprobs(net, p, s.tokens, s.hit_eos, temp);
      REQUIRE(again.size() == s.token_logps.size());
      double sum_a = 0, sum_b = 0;
      for (size_t k = 0; k < again.size(); ++k) {
        sum_a += s.token_logps[k];
        sum_b += again[k];
      }
      CHECK(sum_a == doctest::Approx(sum_b).epsilon(1e-6));
    }
  }
}

TEST_CASE("ode generation is bit-deterministic under a fixed seed") {
  WorldConfig wcfg;
  World world(wcfg);
  Tokenizer tok(world);
  ModelConfig cfg;
  cfg.dim = wcfg.dim;
  cfg.vocab_size = tok.size();
  const auto net = Net<float>::random_init(cfg, 17);
  Rng rng(18);
  const TaskInstance task = world.sample_task(TaskKind::SubjectSubject, rng);
  const TokenizedPrompt p = tokenize_prompt(prompt_of(task), tok);
  Rng g1(5), g2(5);
  const GenResult a = generate(net, p, nullptr, 10, SampleMode::Ode, 0.0, g1);
  const GenResult b = generate(net, p, nullptr, 10, SampleMode::Ode, 0.0, g2);
  CHECK(a.image == b.image);
  CHECK(a.states == b.states);
}

TEST_CASE("sde with sigma zero reproduces the ode trajectory step for step") {
  WorldConfig wcfg;
  World world(wcfg);
  Tokenizer tok(world);
  ModelConfig cfg;
  cfg.dim = wcfg.dim;
  cfg.vocab_size = tok.size();
  const auto net = Net<float>::random_init(cfg, 19);
  Rng rng(20);
  const TaskInstance task = world.sample_task(TaskKind::RefSubjectAdd, rng);
  const TokenizedPrompt p = tokenize_prompt(prompt_of(task), tok);
  Rng g1(6), g2(6);
  const GenResult ode = generate(net, p, nullptr, 16, SampleMode::Ode, 0.0, g1);
  const GenResult sde = generate(net, p, nullptr, 16, SampleMode::Sde, 0.0, g2);
  REQUIRE(ode.states.size() == sde.states.size());
  for (size_t i = 0; i < ode.states.size(); ++i) CHECK(ode.states[i] == sde.states[i]);
}

TEST_CASE("sde per-step log-densities match the closed-form Gaussian formula") {
  WorldConfig wcfg;
  World world(wcfg);
  Tokenizer tok(world);
  ModelConfig cfg;
  cfg.dim = wcfg.dim;
  cfg.vocab_size = tok.size();
  const auto net = Net<float>::random_init(cfg, 21);
  Rng rng(22);
  const TaskInstance task = world.sample_task(TaskKind::RefAttributeGlobal, rng);
  const TokenizedPrompt p = tokenize_prompt(prompt_of(task), tok);
  const int K = 8;
  const double sigma = 0.4;
  Rng grng(7);
  const GenResult gen = generate(net, p, nullptr, K, SampleMode::Sde, sigma, grng);
  REQUIRE(gen.step_logp.size() == static_cast<size_t>(K));

  const auto ctx = net.encode_context(p.refs, p.instr_tokens, nullptr);
  const double dt = 1.0 / K;
  const double sd = sigma * std::sqrt(dt);
  MlpCache<float> cache;
  for (int i = 0; i < K; ++i) {
    const double t = static_cast<double>(K - i) / K;
    std::vector<float> x(gen.states[static_cast<size_t>(i)].begin(),
                         gen.states[static_cast<size_t>(i)].end());
    net.velocity(x.data(), static_cast<float>(t), ctx.ctx, cache);
    double logp = 0;
    for (int d = 0; d < cfg.dim; ++d) {
      const double mean = static_cast<double>(x[static_cast<size_t>(d)]) -
                          dt * static_cast<double>(cache.out[static_cast<size_t>(d)]);
      const double realized = gen.states[static_cast<size_t>(i) + 1][static_cast<size_t>(d)];
      const double z = (realized - mean) / sd;
      logp += -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * 3.14159265358979323846);
    }
    CHECK(std::abs(logp - gen.step_logp[static_cast<size_t>(i)]) < 1e-9);
  }
}

TEST_CASE("cot loss decreases strictly over 50 full-batch steps") {
  WorldConfig wcfg;
  World world(wcfg);
  Tokenizer tok(world);
  ModelConfig cfg;
  cfg.dim = wcfg.dim;
  cfg.vocab_size = tok.size();
  cfg.tok_dim = 16;
  cfg.ctx_dim = 16;
  cfg.head_hidden = 32;
  cfg.vel_hidden = 16;
  auto net = Net<double>::random_init(cfg, 23);
  Rng rng(24);
  std::vector<CotItem<double>> items;
  for (int i = 0; i < 4; ++i) {
    const TaskInstance task =
        world.sample_task(kTaskKinds[static_cast<size_t>(i % 8)], rng);
    items.push_back({tokenize_prompt(prompt_of(task), tok), tok.encode(render_trace(task.gt_trace))});
  }
  double prev = 1e300;
  for (int step = 0; step < 50; ++step) {
    Params<double> grads = make_params<double>(cfg);
    const double loss = cot_loss(net, items, &grads);
    REQUIRE(loss < prev);
    prev = loss;
    axpy_params(net.params, -0.5, grads);
  }
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.vocab_size = 24;
  cfg.tok_dim = 8;
  cfg.ctx_dim = 8;
  cfg.pos_dim = 4;
  cfg.head_hidden = 8;
  cfg.vel_hidden = 8;
  const Params<float> params = random_params<float>(cfg, 99);
  const auto dir = std::filesystem::temp_directory_path() / "icfg_test_ckpt";
  std::filesystem::create_directories(dir);
  const std::string p1 = (dir / "a.icfg").string();
  const std::string p2 = (dir / "b.icfg").string();
  save_checkpoint(p1, cfg, params);
  auto [cfg2, params2] = load_checkpoint(p1);
  CHECK(cfg2 == cfg);
  CHECK(params2 == params);
  save_checkpoint(p2, cfg2, params2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  std::filesystem::remove_all(dir);
}
