#ifndef ICFG_MODEL_HPP_
#define ICFG_MODEL_HPP_

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "icfg/iccot.hpp"
#include "icfg/rng.hpp"
#include "icfg/tensor.hpp"
#include "icfg/tokenizer.hpp"
#include "icfg/world.hpp"

namespace icfg {

struct NumericalFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int dim = 32;                 // image dimension, must match the world
  int vocab_size = 0;           // set from the tokenizer
  int tok_dim = 32;             // token embedding width
  int ctx_dim = 32;             // context vector width
  int pos_dim = 16;             // output position embedding width
  int head_hidden = 64;         // reasoning head hidden width
  int vel_hidden = 128;         // velocity net hidden width
  int max_refs = 4;
  int max_trace_tokens = 128;

  void validate() const {
    auto fail = [](const char* m) { throw std::invalid_argument(std::string("ModelConfig: ") + m); };
    if (dim < 1 || vocab_size < 4 || tok_dim < 1 || ctx_dim < 1 || pos_dim < 1 ||
        head_hidden < 1 || vel_hidden < 1 || max_refs < 1 || max_trace_tokens < 2) {
      fail("all sizes must be positive (vocab must cover specials and tags)");
    }
  }
  bool operator==(const ModelConfig&) const = default;
};

constexpr int kTimeFeatures = 4;  // [t, 1-t, sin(2*pi*t), cos(2*pi*t)]

// All trainable weights. Fixed tensor order defines the checkpoint layout.
template <typename T>
struct Params {
  Tensor<T> tok_emb;     // V x tok_dim
  Tensor<T> out_pos;     // max_trace_tokens x pos_dim
  Tensor<T> ref_w;       // ctx x dim
  Tensor<T> ref_b;       // ctx x 1
  Tensor<T> ref_pos;     // max_refs x ctx
  Tensor<T> instr_w;     // ctx x tok_dim
  Tensor<T> instr_b;     // ctx x 1
  Tensor<T> trace_w;     // ctx x tok_dim
  Tensor<T> trace_b;     // ctx x 1
  Tensor<T> null_trace;  // ctx x 1
  Tensor<T> ctx_w;       // ctx x 3*ctx
  Tensor<T> ctx_b;       // ctx x 1
  Tensor<T> head_w1;     // head_hidden x (tok_dim + pos_dim + ctx)
  Tensor<T> head_b1;
  Tensor<T> head_w2;     // head_hidden x head_hidden
  Tensor<T> head_b2;
  Tensor<T> head_wo;     // V x head_hidden
  Tensor<T> head_bo;
  Tensor<T> vel_w1;      // vel_hidden x (dim + kTimeFeatures + ctx)
  Tensor<T> vel_b1;
  Tensor<T> vel_w2;      // vel_hidden x vel_hidden
  Tensor<T> vel_b2;
  Tensor<T> vel_wo;      // dim x vel_hidden
  Tensor<T> vel_bo;

  template <typename F>
  void for_each(F&& f) {
    f("tok_emb", tok_emb);
    f("out_pos", out_pos);
    f("ref_w", ref_w);
    f("ref_b", ref_b);
    f("ref_pos", ref_pos);
    f("instr_w", instr_w);
    f("instr_b", instr_b);
    f("trace_w", trace_w);
    f("trace_b", trace_b);
    f("null_trace", null_trace);
    f("ctx_w", ctx_w);
    f("ctx_b", ctx_b);
    f("head_w1", head_w1);
    f("head_b1", head_b1);
    f("head_w2", head_w2);
    f("head_b2", head_b2);
    f("head_wo", head_wo);
    f("head_bo", head_bo);
    f("vel_w1", vel_w1);
    f("vel_b1", vel_b1);
    f("vel_w2", vel_w2);
    f("vel_b2", vel_b2);
    f("vel_wo", vel_wo);
    f("vel_bo", vel_bo);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<Params*>(this)->for_each([&](const char* name, Tensor<T>& t) {
      f(name, const_cast<const Tensor<T>&>(t));
    });
  }

  bool operator==(const Params&) const = default;
};

template <typename T>
Params<T> make_params(const ModelConfig& cfg) {
  cfg.validate();
  Params<T> p;
  p.tok_emb = Tensor<T>(cfg.vocab_size, cfg.tok_dim);
  p.out_pos = Tensor<T>(cfg.max_trace_tokens, cfg.pos_dim);
  p.ref_w = Tensor<T>(cfg.ctx_dim, cfg.dim);
  p.ref_b = Tensor<T>(cfg.ctx_dim, 1);
  p.ref_pos = Tensor<T>(cfg.max_refs, cfg.ctx_dim);
  p.instr_w = Tensor<T>(cfg.ctx_dim, cfg.tok_dim);
  p.instr_b = Tensor<T>(cfg.ctx_dim, 1);
  p.trace_w = Tensor<T>(cfg.ctx_dim, cfg.tok_dim);
  p.trace_b = Tensor<T>(cfg.ctx_dim, 1);
  p.null_trace = Tensor<T>(cfg.ctx_dim, 1);
  p.ctx_w = Tensor<T>(cfg.ctx_dim, 3 * cfg.ctx_dim);
  p.ctx_b = Tensor<T>(cfg.ctx_dim, 1);
  const int head_in = cfg.tok_dim + cfg.pos_dim + cfg.ctx_dim;
  p.head_w1 = Tensor<T>(cfg.head_hidden, head_in);
  p.head_b1 = Tensor<T>(cfg.head_hidden, 1);
  p.head_w2 = Tensor<T>(cfg.head_hidden, cfg.head_hidden);
  p.head_b2 = Tensor<T>(cfg.head_hidden, 1);
  p.head_wo = Tensor<T>(cfg.vocab_size, cfg.head_hidden);
  p.head_bo = Tensor<T>(cfg.vocab_size, 1);
  const int vel_in = cfg.dim + kTimeFeatures + cfg.ctx_dim;
  p.vel_w1 = Tensor<T>(cfg.vel_hidden, vel_in);
  p.vel_b1 = Tensor<T>(cfg.vel_hidden, 1);
  p.vel_w2 = Tensor<T>(cfg.vel_hidden, cfg.vel_hidden);
  p.vel_b2 = Tensor<T>(cfg.vel_hidden, 1);
  p.vel_wo = Tensor<T>(cfg.dim, cfg.vel_hidden);
  p.vel_bo = Tensor<T>(cfg.dim, 1);
  return p;
}

template <typename T>
Params<T> random_params(const ModelConfig& cfg, uint64_t seed) {
  Params<T> p = make_params<T>(cfg);
  p.for_each([&](const char* name, Tensor<T>& t) {
    Rng rng(stable_hash(name, hash_combine(seed, 0x1c01)));
    const bool is_bias = t.cols == 1 && std::string_view(name).find("_b") != std::string_view::npos;
    const bool is_table = std::string_view(name) == "tok_emb" ||
                          std::string_view(name) == "out_pos" ||
                          std::string_view(name) == "ref_pos" ||
                          std::string_view(name) == "null_trace";
    if (is_bias) return;  // biases start at zero
    const double scale = is_table ? 0.3 : 1.0 / std::sqrt(static_cast<double>(t.cols));
    for (auto& v : t.v) v = static_cast<T>(scale * rng.normal());
  });
  return p;
}

template <typename T, typename U>
Params<U> cast_params(const Params<T>& src, const ModelConfig& cfg) {
  Params<U> dst = make_params<U>(cfg);
  const Params<T>* s = &src;
  int idx = 0;
  std::vector<const Tensor<T>*> stensors;
  s->for_each([&](const char*, const Tensor<T>& t) { stensors.push_back(&t); });
  dst.for_each([&](const char*, Tensor<U>& t) {
    const Tensor<T>& st = *stensors[static_cast<size_t>(idx++)];
    for (int i = 0; i < t.size(); ++i) t.v[static_cast<size_t>(i)] = static_cast<U>(st.v[static_cast<size_t>(i)]);
  });
  return dst;
}

template <typename T>
std::vector<T> flatten_params(const Params<T>& p) {
  std::vector<T> out;
  p.for_each([&](const char*, const Tensor<T>& t) { out.insert(out.end(), t.v.begin(), t.v.end()); });
  return out;
}

template <typename T>
void unflatten_params(Params<T>& p, const std::vector<T>& flat) {
  size_t off = 0;
  p.for_each([&](const char*, Tensor<T>& t) {
    std::copy(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off) + t.size(), t.v.begin());
    off += static_cast<size_t>(t.size());
  });
}

template <typename T>
bool params_finite(const Params<T>& p) {
  bool ok = true;
  p.for_each([&](const char*, const Tensor<T>& t) {
    for (T v : t.v) ok = ok && std::isfinite(static_cast<double>(v));
  });
  return ok;
}

// p += scale * g  (no-op when scale is exactly zero, keeping byte identity)
template <typename T>
void axpy_params(Params<T>& p, T scale, const Params<T>& g) {
  if (scale == T(0)) return;
  std::vector<const Tensor<T>*> gt;
  g.for_each([&](const char*, const Tensor<T>& t) { gt.push_back(&t); });
  int idx = 0;
  p.for_each([&](const char*, Tensor<T>& t) {
    const Tensor<T>& src = *gt[static_cast<size_t>(idx++)];
    for (int i = 0; i < t.size(); ++i) t.v[static_cast<size_t>(i)] += scale * src.v[static_cast<size_t>(i)];
  });
}

// ---------------------------------------------------------------------------
// prompts and tokenized inputs

struct Prompt {
  std::vector<ImageVec> refs;
  std::string instruction;
};

inline Prompt prompt_of(const TaskInstance& task) {
  Prompt p;
  for (const auto& r : task.refs) p.refs.push_back(r.image);
  p.instruction = task.instruction;
  return p;
}

struct TokenizedPrompt {
  std::vector<ImageVec> refs;
  std::vector<int> instr_tokens;
};

inline TokenizedPrompt tokenize_prompt(const Prompt& p, const Tokenizer& tok) {
  return TokenizedPrompt{p.refs, tok.encode(p.instruction)};
}

// ---------------------------------------------------------------------------
// network

template <typename T>
struct CtxCache {
  std::vector<std::vector<T>> ref_inputs;
  std::vector<int> instr_tokens;
  bool has_trace = false;
  std::vector<int> trace_tokens;

  std::vector<std::vector<T>> ref_acts;  // per-ref tanh activations, ctx each
  std::vector<T> instr_pool;             // tok_dim
  std::vector<T> trace_pool;             // tok_dim (only when has_trace)
  std::vector<T> ctx_in;                 // 3*ctx
  std::vector<T> ctx;                    // ctx (tanh output)
};

template <typename T>
struct MlpCache {
  std::vector<T> in;
  std::vector<T> h1;
  std::vector<T> h2;
  std::vector<T> out;
};

template <typename T>
class Net {
 public:
  ModelConfig cfg;
  Params<T> params;

  Net() = default;
  Net(ModelConfig c, Params<T> p) : cfg(std::move(c)), params(std::move(p)) {}

  static Net random_init(const ModelConfig& cfg, uint64_t seed) {
    return Net(cfg, random_params<T>(cfg, seed));
  }

  // -- context encoder ------------------------------------------------------

  CtxCache<T> encode_context(const std::vector<ImageVec>& refs,
                             const std::vector<int>& instr_tokens,
                             const std::vector<int>* trace_tokens) const {
    if (static_cast<int>(refs.size()) > cfg.max_refs) {
      throw std::invalid_argument("encode_context: too many references");
    }
    if (static_cast<int>(instr_tokens.size()) > cfg.max_trace_tokens) {
      throw std::invalid_argument("encode_context: instruction too long");
    }
    if (trace_tokens && static_cast<int>(trace_tokens->size()) > cfg.max_trace_tokens) {
      throw std::invalid_argument("encode_context: trace too long");
    }
    const int C = cfg.ctx_dim;
    CtxCache<T> cache;
    cache.instr_tokens = instr_tokens;
    cache.has_trace = trace_tokens != nullptr;
    if (trace_tokens) cache.trace_tokens = *trace_tokens;
    for (const auto& r : refs) {
      if (static_cast<int>(r.values.size()) != cfg.dim) {
        throw std::invalid_argument("encode_context: reference dimension mismatch");
      }
      std::vector<T> rv(r.values.begin(), r.values.end());
      cache.ref_inputs.push_back(std::move(rv));
    }

    cache.ctx_in.assign(static_cast<size_t>(3 * C), T(0));
    T* ref_pool = cache.ctx_in.data();
    T* instr_part = cache.ctx_in.data() + C;
    T* trace_part = cache.ctx_in.data() + 2 * C;

    // per-reference tanh blocks keep the pooling order-sensitive: the
    // position embedding interacts with the projected image inside the
    // nonlinearity
    const int R = static_cast<int>(cache.ref_inputs.size());
    if (R > 0) {
      std::vector<T> proj(static_cast<size_t>(C));
      for (int i = 0; i < R; ++i) {
        mat_vec(params.ref_w, cache.ref_inputs[static_cast<size_t>(i)].data(), proj.data());
        std::vector<T> act(static_cast<size_t>(C));
        for (int c = 0; c < C; ++c) {
          act[static_cast<size_t>(c)] =
              std::tanh(proj[static_cast<size_t>(c)] + params.ref_b.v[static_cast<size_t>(c)] +
                        params.ref_pos(i, c));
          ref_pool[c] += act[static_cast<size_t>(c)] / static_cast<T>(R);
        }
        cache.ref_acts.push_back(std::move(act));
      }
    }

    cache.instr_pool = mean_embedding(cache.instr_tokens);
    {
      std::vector<T> part(static_cast<size_t>(C));
      mat_vec(params.instr_w, cache.instr_pool.data(), part.data());
      for (int c = 0; c < C; ++c) instr_part[c] = part[static_cast<size_t>(c)] + params.instr_b.v[static_cast<size_t>(c)];
    }

    if (cache.has_trace) {
      cache.trace_pool = mean_embedding(cache.trace_tokens);
      std::vector<T> part(static_cast<size_t>(C));
      mat_vec(params.trace_w, cache.trace_pool.data(), part.data());
      for (int c = 0; c < C; ++c) trace_part[c] = part[static_cast<size_t>(c)] + params.trace_b.v[static_cast<size_t>(c)];
    } else {
      for (int c = 0; c < C; ++c) trace_part[c] = params.null_trace.v[static_cast<size_t>(c)];
    }

    cache.ctx.assign(static_cast<size_t>(C), T(0));
    mat_vec(params.ctx_w, cache.ctx_in.data(), cache.ctx.data());
    for (int c = 0; c < C; ++c) {
      cache.ctx[static_cast<size_t>(c)] =
          std::tanh(cache.ctx[static_cast<size_t>(c)] + params.ctx_b.v[static_cast<size_t>(c)]);
    }
    return cache;
  }

  void ctx_backward(const CtxCache<T>& cache, const std::vector<T>& gctx, Params<T>& grads) const {
    const int C = cfg.ctx_dim;
    std::vector<T> gpre(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
      const T y = cache.ctx[static_cast<size_t>(c)];
      gpre[static_cast<size_t>(c)] = gctx[static_cast<size_t>(c)] * (T(1) - y * y);
    }
    outer_acc(grads.ctx_w, gpre.data(), cache.ctx_in.data());
    for (int c = 0; c < C; ++c) grads.ctx_b.v[static_cast<size_t>(c)] += gpre[static_cast<size_t>(c)];
    std::vector<T> gin(static_cast<size_t>(3 * C), T(0));
    mat_tvec_acc(params.ctx_w, gpre.data(), gin.data());

    const T* g_ref_pool = gin.data();
    const T* g_instr_part = gin.data() + C;
    const T* g_trace_part = gin.data() + 2 * C;

    const int R = static_cast<int>(cache.ref_inputs.size());
    if (R > 0) {
      std::vector<T> gpre_ref(static_cast<size_t>(C));
      for (int i = 0; i < R; ++i) {
        const auto& act = cache.ref_acts[static_cast<size_t>(i)];
        for (int c = 0; c < C; ++c) {
          const T a = act[static_cast<size_t>(c)];
          gpre_ref[static_cast<size_t>(c)] =
              g_ref_pool[c] / static_cast<T>(R) * (T(1) - a * a);
        }
        outer_acc(grads.ref_w, gpre_ref.data(), cache.ref_inputs[static_cast<size_t>(i)].data());
        for (int c = 0; c < C; ++c) {
          grads.ref_b.v[static_cast<size_t>(c)] += gpre_ref[static_cast<size_t>(c)];
          grads.ref_pos(i, c) += gpre_ref[static_cast<size_t>(c)];
        }
      }
    }

    outer_acc(grads.instr_w, g_instr_part, cache.instr_pool.data());
    for (int c = 0; c < C; ++c) grads.instr_b.v[static_cast<size_t>(c)] += g_instr_part[c];
    {
      std::vector<T> gpool(static_cast<size_t>(cfg.tok_dim), T(0));
      mat_tvec_acc(params.instr_w, g_instr_part, gpool.data());
      mean_embedding_backward(cache.instr_tokens, gpool, grads);
    }

    if (cache.has_trace) {
      outer_acc(grads.trace_w, g_trace_part, cache.trace_pool.data());
      for (int c = 0; c < C; ++c) grads.trace_b.v[static_cast<size_t>(c)] += g_trace_part[c];
      std::vector<T> gpool(static_cast<size_t>(cfg.tok_dim), T(0));
      mat_tvec_acc(params.trace_w, g_trace_part, gpool.data());
      mean_embedding_backward(cache.trace_tokens, gpool, grads);
    } else {
      for (int c = 0; c < C; ++c) grads.null_trace.v[static_cast<size_t>(c)] += g_trace_part[c];
    }
  }

  // -- reasoning head -------------------------------------------------------

  // logits for the token at output position `pos` given the previous token
  void head_step(int prev_tok, int pos, const std::vector<T>& ctx, MlpCache<T>& cache) const {
    const int in_dim = cfg.tok_dim + cfg.pos_dim + cfg.ctx_dim;
    cache.in.assign(static_cast<size_t>(in_dim), T(0));
    for (int i = 0; i < cfg.tok_dim; ++i) cache.in[static_cast<size_t>(i)] = params.tok_emb(prev_tok, i);
    for (int i = 0; i < cfg.pos_dim; ++i) cache.in[static_cast<size_t>(cfg.tok_dim + i)] = params.out_pos(pos, i);
    for (int i = 0; i < cfg.ctx_dim; ++i) {
      cache.in[static_cast<size_t>(cfg.tok_dim + cfg.pos_dim + i)] = ctx[static_cast<size_t>(i)];
    }
    mlp_forward(params.head_w1, params.head_b1, params.head_w2, params.head_b2, params.head_wo,
                params.head_bo, cache);
  }

  // dlogits -> grads and gctx (token/pos rows accumulated internally)
  void head_backward(int prev_tok, int pos, const MlpCache<T>& cache, const std::vector<T>& dlogits,
                     Params<T>& grads, std::vector<T>& gctx) const {
    std::vector<T> gin(cache.in.size(), T(0));
    mlp_backward(params.head_w1, params.head_b1, params.head_w2, params.head_b2, params.head_wo,
                 params.head_bo, grads.head_w1, grads.head_b1, grads.head_w2, grads.head_b2,
                 grads.head_wo, grads.head_bo, cache, dlogits, gin);
    for (int i = 0; i < cfg.tok_dim; ++i) grads.tok_emb(prev_tok, i) += gin[static_cast<size_t>(i)];
    for (int i = 0; i < cfg.pos_dim; ++i) grads.out_pos(pos, i) += gin[static_cast<size_t>(cfg.tok_dim + i)];
    for (int i = 0; i < cfg.ctx_dim; ++i) {
      gctx[static_cast<size_t>(i)] += gin[static_cast<size_t>(cfg.tok_dim + cfg.pos_dim + i)];
    }
  }

  // -- velocity field -------------------------------------------------------

  void velocity(const T* x, T t, const std::vector<T>& ctx, MlpCache<T>& cache) const {
    const int in_dim = cfg.dim + kTimeFeatures + cfg.ctx_dim;
    cache.in.assign(static_cast<size_t>(in_dim), T(0));
    for (int i = 0; i < cfg.dim; ++i) cache.in[static_cast<size_t>(i)] = x[i];
    const double td = static_cast<double>(t);
    cache.in[static_cast<size_t>(cfg.dim + 0)] = t;
    cache.in[static_cast<size_t>(cfg.dim + 1)] = T(1) - t;
    cache.in[static_cast<size_t>(cfg.dim + 2)] = static_cast<T>(std::sin(6.283185307179586 * td));
    cache.in[static_cast<size_t>(cfg.dim + 3)] = static_cast<T>(std::cos(6.283185307179586 * td));
    for (int i = 0; i < cfg.ctx_dim; ++i) {
      cache.in[static_cast<size_t>(cfg.dim + kTimeFeatures + i)] = ctx[static_cast<size_t>(i)];
    }
    mlp_forward(params.vel_w1, params.vel_b1, params.vel_w2, params.vel_b2, params.vel_wo,
                params.vel_bo, cache);
  }

  void velocity_backward(const MlpCache<T>& cache, const std::vector<T>& gv, Params<T>& grads,
                         std::vector<T>& gctx) const {
    std::vector<T> gin(cache.in.size(), T(0));
    mlp_backward(params.vel_w1, params.vel_b1, params.vel_w2, params.vel_b2, params.vel_wo,
                 params.vel_bo, grads.vel_w1, grads.vel_b1, grads.vel_w2, grads.vel_b2,
                 grads.vel_wo, grads.vel_bo, cache, gv, gin);
    for (int i = 0; i < cfg.ctx_dim; ++i) {
      gctx[static_cast<size_t>(i)] += gin[static_cast<size_t>(cfg.dim + kTimeFeatures + i)];
    }
  }

 private:
  std::vector<T> mean_embedding(const std::vector<int>& tokens) const {
    std::vector<T> out(static_cast<size_t>(cfg.tok_dim), T(0));
    if (tokens.empty()) return out;
    for (int tok : tokens) {
      for (int i = 0; i < cfg.tok_dim; ++i) out[static_cast<size_t>(i)] += params.tok_emb(tok, i);
    }
    for (auto& v : out) v /= static_cast<T>(tokens.size());
    return out;
  }

  void mean_embedding_backward(const std::vector<int>& tokens, const std::vector<T>& gpool,
                               Params<T>& grads) const {
    if (tokens.empty()) return;
    const T inv = T(1) / static_cast<T>(tokens.size());
    for (int tok : tokens) {
      for (int i = 0; i < cfg.tok_dim; ++i) {
        grads.tok_emb(tok, i) += gpool[static_cast<size_t>(i)] * inv;
      }
    }
  }

  static void mlp_forward(const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2,
                          const Tensor<T>& b2, const Tensor<T>& wo, const Tensor<T>& bo,
                          MlpCache<T>& cache) {
    cache.h1.assign(static_cast<size_t>(w1.rows), T(0));
    mat_vec(w1, cache.in.data(), cache.h1.data());
    for (int i = 0; i < w1.rows; ++i) {
      cache.h1[static_cast<size_t>(i)] = std::tanh(cache.h1[static_cast<size_t>(i)] + b1.v[static_cast<size_t>(i)]);
    }
    cache.h2.assign(static_cast<size_t>(w2.rows), T(0));
    mat_vec(w2, cache.h1.data(), cache.h2.data());
    for (int i = 0; i < w2.rows; ++i) {
      cache.h2[static_cast<size_t>(i)] = std::tanh(cache.h2[static_cast<size_t>(i)] + b2.v[static_cast<size_t>(i)]);
    }
    cache.out.assign(static_cast<size_t>(wo.rows), T(0));
    mat_vec(wo, cache.h2.data(), cache.out.data());
    for (int i = 0; i < wo.rows; ++i) cache.out[static_cast<size_t>(i)] += bo.v[static_cast<size_t>(i)];
  }

  static void mlp_backward(const Tensor<T>& w1, const Tensor<T>&, const Tensor<T>& w2,
                           const Tensor<T>&, const Tensor<T>& wo, const Tensor<T>&,
                           Tensor<T>& gw1, Tensor<T>& gb1, Tensor<T>& gw2, Tensor<T>& gb2,
                           Tensor<T>& gwo, Tensor<T>& gbo, const MlpCache<T>& cache,
                           const std::vector<T>& gout, std::vector<T>& gin) {
    outer_acc(gwo, gout.data(), cache.h2.data());
    for (int i = 0; i < gbo.rows; ++i) gbo.v[static_cast<size_t>(i)] += gout[static_cast<size_t>(i)];
    std::vector<T> gh2(cache.h2.size(), T(0));
    mat_tvec_acc(wo, gout.data(), gh2.data());
    for (size_t i = 0; i < gh2.size(); ++i) {
      const T y = cache.h2[i];
      gh2[i] *= (T(1) - y * y);
    }
    outer_acc(gw2, gh2.data(), cache.h1.data());
    for (int i = 0; i < gb2.rows; ++i) gb2.v[static_cast<size_t>(i)] += gh2[static_cast<size_t>(i)];
    std::vector<T> gh1(cache.h1.size(), T(0));
    mat_tvec_acc(w2, gh2.data(), gh1.data());
    for (size_t i = 0; i < gh1.size(); ++i) {
      const T y = cache.h1[i];
      gh1[i] *= (T(1) - y * y);
    }
    outer_acc(gw1, gh1.data(), cache.in.data());
    for (int i = 0; i < gb1.rows; ++i) gb1.v[static_cast<size_t>(i)] += gh1[static_cast<size_t>(i)];
    mat_tvec_acc(w1, gh1.data(), gin.data());
  }
};

// ---------------------------------------------------------------------------
// losses

template <typename T>
struct CotItem {
  TokenizedPrompt prompt;
  std::vector<int> trace_tokens;  // rendered trace, no BOS/EOS
};

template <typename T>
struct FlowItem {
  TokenizedPrompt prompt;
  std::optional<std::vector<int>> trace_tokens;  // nullopt = null-trace path
  ImageVec x0;
};

// stable log-softmax; returns log p[target] and optionally the full softmax
template <typename T>
double log_softmax_pick(const std::vector<T>& logits, int target, std::vector<double>* probs) {
  double mx = -1e300;
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0;
  for (T v : logits) z += std::exp(static_cast<double>(v) - mx);
  const double logz = std::log(z) + mx;
  if (probs) {
    probs->resize(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
      (*probs)[i] = std::exp(static_cast<double>(logits[i]) - logz);
    }
  }
  return static_cast<double>(logits[static_cast<size_t>(target)]) - logz;
}

// Teacher-forced mean negative log-likelihood over all predicted tokens
// (BOS-prefixed, EOS-terminated). Exact gradient when grads != nullptr.
template <typename T>
double cot_loss(const Net<T>& net, const std::vector<CotItem<T>>& items,
                Params<T>* grads = nullptr) {
  long total_tokens = 0;
  for (const auto& it : items) total_tokens += static_cast<long>(it.trace_tokens.size()) + 1;  // +EOS
  if (total_tokens == 0) return 0.0;

  double nll = 0;
  for (const auto& it : items) {
    CtxCache<T> ctx = net.encode_context(it.prompt.refs, it.prompt.instr_tokens, nullptr);
    std::vector<int> seq;
    seq.push_back(kBosId);
    seq.insert(seq.end(), it.trace_tokens.begin(), it.trace_tokens.end());
    seq.push_back(kEosId);
    if (static_cast<int>(seq.size()) - 1 > net.cfg.max_trace_tokens) {
      throw std::invalid_argument("cot_loss: trace longer than max_trace_tokens");
    }
    std::vector<T> gctx(static_cast<size_t>(net.cfg.ctx_dim), T(0));
    MlpCache<T> cache;
    std::vector<double> probs;
    for (size_t k = 1; k < seq.size(); ++k) {
      const int prev = seq[k - 1];
      const int target = seq[k];
      net.head_step(prev, static_cast<int>(k - 1), ctx.ctx, cache);
      const double logp = log_softmax_pick(cache.out, target, grads ? &probs : nullptr);
      if (!std::isfinite(logp)) throw NumericalFault("cot_loss: non-finite log-probability");
      nll -= logp;
      if (grads) {
        std::vector<T> dlogits(cache.out.size());
        for (size_t i = 0; i < dlogits.size(); ++i) {
          dlogits[i] = static_cast<T>(probs[i] / static_cast<double>(total_tokens));
        }
        dlogits[static_cast<size_t>(target)] -= static_cast<T>(1.0 / static_cast<double>(total_tokens));
        net.head_backward(prev, static_cast<int>(k - 1), cache, dlogits, *grads, gctx);
      }
    }
    if (grads) net.ctx_backward(ctx, gctx, *grads);
  }
  const double loss = nll / static_cast<double>(total_tokens);
  if (!std::isfinite(loss)) throw NumericalFault("cot_loss: non-finite loss");
  return loss;
}

// linear interpolation path: x_t = (1-t) x0 + t x1, target v = x1 - x0
inline void flow_interpolate(const double* x0, const double* x1, double t, int dim, double* xt,
                             double* v) {
  for (int d = 0; d < dim; ++d) {
    xt[d] = (1.0 - t) * x0[d] + t * x1[d];
    v[d] = x1[d] - x0[d];
  }
}

// Rectified-flow matching loss: mean over the batch of ||v - v_theta||^2
// with t ~ U[0,1], x1 ~ N(0,I), x_t = (1-t) x0 + t x1, v = x1 - x0.
// Pass rng by value so callers can replay the same noise.
template <typename T>
double flow_loss(const Net<T>& net, const std::vector<FlowItem<T>>& items, Rng rng,
                 Params<T>* grads = nullptr) {
  if (items.empty()) return 0.0;
  const int D = net.cfg.dim;
  double total = 0;
  for (const auto& it : items) {
    CtxCache<T> ctx = net.encode_context(it.prompt.refs, it.prompt.instr_tokens,
                                         it.trace_tokens ? &*it.trace_tokens : nullptr);
    const double t = rng.uniform();
    std::vector<double> x1(static_cast<size_t>(D)), xtd(static_cast<size_t>(D)),
        vd(static_cast<size_t>(D));
    for (auto& n : x1) n = rng.normal();
    flow_interpolate(it.x0.values.data(), x1.data(), t, D, xtd.data(), vd.data());
    std::vector<T> xt(static_cast<size_t>(D)), v(static_cast<size_t>(D));
    for (int d = 0; d < D; ++d) {
      xt[static_cast<size_t>(d)] = static_cast<T>(xtd[static_cast<size_t>(d)]);
      v[static_cast<size_t>(d)] = static_cast<T>(vd[static_cast<size_t>(d)]);
    }
    MlpCache<T> cache;
    net.velocity(xt.data(), static_cast<T>(t), ctx.ctx, cache);
    double sq = 0;
    std::vector<T> gv(static_cast<size_t>(D), T(0));
    for (int d = 0; d < D; ++d) {
      const double r = static_cast<double>(cache.out[static_cast<size_t>(d)]) -
                       static_cast<double>(v[static_cast<size_t>(d)]);
      sq += r * r;
      gv[static_cast<size_t>(d)] = static_cast<T>(2.0 * r / static_cast<double>(items.size()));
    }
    if (!std::isfinite(sq)) throw NumericalFault("flow_loss: non-finite residual");
    total += sq;
    if (grads) {
      std::vector<T> gctx(static_cast<size_t>(net.cfg.ctx_dim), T(0));
      net.velocity_backward(cache, gv, *grads, gctx);
      net.ctx_backward(ctx, gctx, *grads);
    }
  }
  return total / static_cast<double>(items.size());
}

// ---------------------------------------------------------------------------
// sampling and generation

struct SampledTrace {
  std::vector<int> tokens;          // sampled tokens, EOS excluded
  bool hit_eos = false;
  std::vector<double> token_logps;  // one per sampled step, EOS included
  std::string raw_text;
  ReasoningTrace trace;             // parsed, or the empty-caption fallback
  bool parsed = false;
};

// log-prob of each token of `seq` (EOS appended when hit_eos) under the
// sampling distribution at `temperature`; greedy (0) reports untempered
// probabilities of the chosen tokens.
template <typename T>
std::vector<double> trace_logprobs(const Net<T>& net, const TokenizedPrompt& prompt,
                                   const std::vector<int>& seq, bool hit_eos, double temperature) {
  CtxCache<T> ctx = net.encode_context(prompt.refs, prompt.instr_tokens, nullptr);
  std::vector<int> full = seq;
  if (hit_eos) full.push_back(kEosId);
  std::vector<double> out;
  MlpCache<T> cache;
  int prev = kBosId;
  for (size_t k = 0; k < full.size(); ++k) {
    net.head_step(prev, static_cast<int>(k), ctx.ctx, cache);
    std::vector<T> logits = cache.out;
    if (temperature > 0) {
      for (auto& v : logits) v = static_cast<T>(static_cast<double>(v) / temperature);
    }
    out.push_back(log_softmax_pick(logits, full[k], nullptr));
    prev = full[k];
  }
  return out;
}

template <typename T>
SampledTrace sample_trace(const Net<T>& net, const TokenizedPrompt& prompt, double temperature,
                          Rng& rng, const Tokenizer& tok, int num_refs) {
  if (temperature < 0) throw std::invalid_argument("sample_trace: temperature must be >= 0");
  CtxCache<T> ctx = net.encode_context(prompt.refs, prompt.instr_tokens, nullptr);
  SampledTrace out;
  MlpCache<T> cache;
  std::vector<double> probs;
  int prev = tok.bos();
  for (int k = 0; k < net.cfg.max_trace_tokens; ++k) {
    net.head_step(prev, k, ctx.ctx, cache);
    std::vector<T> logits = cache.out;
    if (temperature > 0) {
      for (auto& v : logits) v = static_cast<T>(static_cast<double>(v) / temperature);
    }
    int chosen;
    if (temperature == 0) {
      chosen = 0;
      for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[static_cast<size_t>(chosen)]) chosen = static_cast<int>(i);
      }
    } else {
      log_softmax_pick(logits, 0, &probs);
      const double u = rng.uniform();
      double acc = 0;
      chosen = static_cast<int>(probs.size()) - 1;
      for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
          chosen = static_cast<int>(i);
          break;
        }
      }
    }
    out.token_logps.push_back(log_softmax_pick(logits, chosen, nullptr));
    if (chosen == tok.eos()) {
      out.hit_eos = true;
      break;
    }
    out.tokens.push_back(chosen);
    prev = chosen;
  }
  out.raw_text = tok.decode(out.tokens);
  const ParseResult parsed = parse_trace(out.raw_text, num_refs);
  out.parsed = parsed.ok();
  if (parsed.ok()) {
    out.trace = *parsed.trace;
  } else {
    out.trace = ReasoningTrace{"", {}};  // empty-caption fallback
  }
  return out;
}

// ---------------------------------------------------------------------------
// denoising sampler

enum class SampleMode { Ode, Sde };

struct GenResult {
  ImageVec image;                            // final x at t=0, not normalized
  std::vector<std::vector<double>> states;   // K+1 states, states[0] at t=1
  std::vector<double> step_logp;             // K entries; zeros in ode / sigma=0
};

inline double gaussian_logpdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.9189385332046727;  // log(sqrt(2*pi))
}

template <typename T>
GenResult generate(const Net<T>& net, const TokenizedPrompt& prompt,
                   const std::vector<int>* trace_tokens, int steps, SampleMode mode, double sigma,
                   Rng& rng) {
  if (steps < 1) throw std::invalid_argument("generate: steps must be >= 1");
  if (mode == SampleMode::Ode) sigma = 0.0;
  const int D = net.cfg.dim;
  CtxCache<T> ctx = net.encode_context(prompt.refs, prompt.instr_tokens, trace_tokens);

  std::vector<T> x(static_cast<size_t>(D));
  for (auto& v : x) v = static_cast<T>(rng.normal());

  GenResult out;
  out.states.reserve(static_cast<size_t>(steps) + 1);
  out.states.emplace_back(x.begin(), x.end());

  const double dt = 1.0 / static_cast<double>(steps);
  const double sd = sigma * std::sqrt(dt);
  MlpCache<T> cache;
  for (int i = 0; i < steps; ++i) {
    const double t = static_cast<double>(steps - i) / static_cast<double>(steps);
    net.velocity(x.data(), static_cast<T>(t), ctx.ctx, cache);
    double logp = 0;
    double norm2 = 0;
    for (int d = 0; d < D; ++d) {
      const double mean = static_cast<double>(x[static_cast<size_t>(d)]) -
                          dt * static_cast<double>(cache.out[static_cast<size_t>(d)]);
      T next = static_cast<T>(mean);
      if (sd > 0) {
        next = static_cast<T>(mean + sd * rng.normal());
        // density of the realized (stored) point, so that recomputation from
        // the stored trajectory reproduces it exactly
        logp += gaussian_logpdf(static_cast<double>(next), mean, sd);
      }
      x[static_cast<size_t>(d)] = next;
      norm2 += static_cast<double>(next) * static_cast<double>(next);
    }
    if (!std::isfinite(norm2) || norm2 > 1e12) {
      throw NumericalFault("generate: trajectory diverged");
    }
    out.step_logp.push_back(logp);
    out.states.emplace_back(x.begin(), x.end());
  }
  out.image.values.assign(x.begin(), x.end());
  return out;
}

}  // namespace icfg

#endif  // ICFG_MODEL_HPP_
