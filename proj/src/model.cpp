#include "icfg/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace icfg {

using Json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'I', 'C', 'F', 'G'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

Json model_config_to_json(const ModelConfig& cfg) {
  Json j;
  j["dim"] = cfg.dim;
  j["vocab_size"] = cfg.vocab_size;
  j["tok_dim"] = cfg.tok_dim;
  j["ctx_dim"] = cfg.ctx_dim;
  j["pos_dim"] = cfg.pos_dim;
  j["head_hidden"] = cfg.head_hidden;
  j["vel_hidden"] = cfg.vel_hidden;
  j["max_refs"] = cfg.max_refs;
  j["max_trace_tokens"] = cfg.max_trace_tokens;
  return j;
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig cfg;
  cfg.dim = j.value("dim", cfg.dim);
  cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
  cfg.tok_dim = j.value("tok_dim", cfg.tok_dim);
  cfg.ctx_dim = j.value("ctx_dim", cfg.ctx_dim);
  cfg.pos_dim = j.value("pos_dim", cfg.pos_dim);
  cfg.head_hidden = j.value("head_hidden", cfg.head_hidden);
  cfg.vel_hidden = j.value("vel_hidden", cfg.vel_hidden);
  cfg.max_refs = j.value("max_refs", cfg.max_refs);
  cfg.max_trace_tokens = j.value("max_trace_tokens", cfg.max_trace_tokens);
  return cfg;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Params<float>& params) {
  Json header;
  header["config"] = model_config_to_json(cfg);
  Json tensors = Json::array();
  params.for_each([&](const char* name, const Tensor<float>& t) {
    Json tj;
    tj["name"] = name;
    tj["rows"] = t.rows;
    tj["cols"] = t.cols;
    tensors.push_back(tj);
  });
  header["tensors"] = tensors;
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(header_text.size()));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  params.for_each([&](const char*, const Tensor<float>& t) {
    // little-endian IEEE-754 float32; raw bytes on LE hosts
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(float)));
  });
  if (!out) throw std::runtime_error("short write while saving checkpoint: " + path);
}

std::pair<ModelConfig, Params<float>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  }
  const uint32_t version = get_u32(in);
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const uint32_t header_len = get_u32(in);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  const Json header = Json::parse(header_text);
  const ModelConfig cfg = model_config_from_json(header.at("config"));
  Params<float> params = make_params<float>(cfg);

  size_t idx = 0;
  const Json& tensors = header.at("tensors");
  params.for_each([&](const char* name, Tensor<float>& t) {
    if (idx >= tensors.size()) throw std::runtime_error("checkpoint header missing tensors");
    const Json& tj = tensors[idx++];
    if (tj.at("name").get<std::string>() != name || tj.at("rows").get<int>() != t.rows ||
        tj.at("cols").get<int>() != t.cols) {
      throw std::runtime_error("checkpoint tensor mismatch at '" + std::string(name) + "'");
    }
    in.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(float)));
  });
  if (!in) throw std::runtime_error("truncated checkpoint data: " + path);
  return {cfg, std::move(params)};
}

}  // namespace icfg
