#include "icfg/world.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace icfg {

namespace {

// Fixed word pools. Config vocabulary sizes select prefixes; every word is
// globally unique so caption parsing never needs lookahead.
constexpr std::array<std::string_view, 12> kCharacterWords = {
    "wizard", "knight", "robot", "pirate", "witch", "ranger",
    "monk",   "bard",   "golem", "scout",  "jester", "nomad"};
constexpr std::array<std::string_view, 12> kObjectWords = {
    "lantern", "sword", "book",   "crystal", "drum",   "kite",
    "mirror",  "wheel", "goblet", "banner",  "anchor", "harp"};
constexpr std::array<std::string_view, 8> kSceneWords = {
    "forest", "desert", "harbor", "castle", "meadow", "cavern", "rooftop", "glacier"};
constexpr std::array<std::string_view, 8> kColorWords = {
    "red", "blue", "green", "gold", "silver", "violet", "amber", "teal"};
constexpr std::array<std::string_view, 6> kTextureWords = {
    "smooth", "rough", "striped", "dotted", "woven", "glossy"};
constexpr std::array<std::string_view, 6> kStyleWords = {
    "sketch", "pixel", "oil", "neon", "pastel", "ink"};
constexpr std::array<std::string_view, 6> kPoseWords = {
    "standing", "sitting", "flying", "crouching", "leaning", "running"};

std::vector<int> sample_distinct(Rng& rng, int total, int k) {
  std::vector<int> pool(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) pool[static_cast<size_t>(i)] = i;
  std::vector<int> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    const int j = i + rng.uniform_int(total - i);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    out.push_back(pool[static_cast<size_t>(i)]);
  }
  return out;
}

}  // namespace

std::string_view entity_kind_name(EntityKind k) {
  return k == EntityKind::Character ? "character" : "object";
}

std::string_view attr_slot_name(AttrSlot s) {
  switch (s) {
    case AttrSlot::Color: return "color";
    case AttrSlot::Texture: return "texture";
    case AttrSlot::Style: return "style";
    case AttrSlot::Pose: return "pose";
  }
  return "?";
}

std::string_view task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::SubjectDriven: return "SubjectDriven";
    case TaskKind::SubjectSubject: return "SubjectSubject";
    case TaskKind::SubjectScene: return "SubjectScene";
    case TaskKind::RefSubjectAdd: return "RefSubjectAdd";
    case TaskKind::RefSubjectReplace: return "RefSubjectReplace";
    case TaskKind::RefAttributeLocal: return "RefAttributeLocal";
    case TaskKind::RefAttributeGlobal: return "RefAttributeGlobal";
    case TaskKind::RefSceneEdit: return "RefSceneEdit";
  }
  return "?";
}

std::optional<TaskKind> task_kind_from_name(std::string_view name) {
  for (TaskKind k : kTaskKinds) {
    if (task_kind_name(k) == name) return k;
  }
  return std::nullopt;
}

double dot(const ImageVec& a, const ImageVec& b) {
  if (a.values.size() != b.values.size()) {
    throw std::invalid_argument("dot: dimension mismatch");
  }
  double s = 0;
  for (size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
  return s;
}

double norm(const ImageVec& a) { return std::sqrt(dot(a, a)); }

double cosine(const ImageVec& a, const ImageVec& b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

int WorldConfig::attr_values(AttrSlot slot) const {
  switch (slot) {
    case AttrSlot::Color: return n_colors;
    case AttrSlot::Texture: return n_textures;
    case AttrSlot::Style: return n_styles;
    case AttrSlot::Pose: return n_poses;
  }
  return 0;
}

void WorldConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("WorldConfig: " + msg); };
  if (dim < 16) fail("dim must be >= 16");
  if (positions < 1) fail("positions must be >= 1");
  if (dim / (positions + 1) < 8) fail("dim must be >= 8*(positions+1)");
  if (n_characters < 2 || n_objects < 2 || n_scenes < 2 || n_colors < 2 || n_textures < 2 ||
      n_styles < 2 || n_poses < 2) {
    fail("every vocabulary size must be >= 2");
  }
  if (n_characters > static_cast<int>(kCharacterWords.size())) fail("n_characters exceeds word pool");
  if (n_objects > static_cast<int>(kObjectWords.size())) fail("n_objects exceeds word pool");
  if (n_scenes > static_cast<int>(kSceneWords.size())) fail("n_scenes exceeds word pool");
  if (n_colors > static_cast<int>(kColorWords.size())) fail("n_colors exceeds word pool");
  if (n_textures > static_cast<int>(kTextureWords.size())) fail("n_textures exceeds word pool");
  if (n_styles > static_cast<int>(kStyleWords.size())) fail("n_styles exceeds word pool");
  if (n_poses > static_cast<int>(kPoseWords.size())) fail("n_poses exceeds word pool");
  if (ambiguity_rate < 0.0 || ambiguity_rate > 1.0) fail("ambiguity_rate must be in [0,1]");
}

bool SceneProperty::satisfied_by(const SceneSpec& spec) const {
  switch (kind) {
    case Kind::SceneIs:
      return spec.scene_id == scene_id;
    case Kind::IdentPresent:
      for (const auto& e : spec.entities) {
        if (e.kind == entity_kind && e.identity == identity) return true;
      }
      return false;
    case Kind::IdentAbsent:
      for (const auto& e : spec.entities) {
        if (e.kind == entity_kind && e.identity == identity) return false;
      }
      return true;
    case Kind::AttrIs:
      for (const auto& e : spec.entities) {
        if (e.kind == entity_kind && e.identity == identity) {
          auto it = e.attributes.find(slot);
          if (it != e.attributes.end() && it->second == value) return true;
        }
      }
      return false;
  }
  return false;
}

World::World(WorldConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int n = feature_count();
  prototypes_.resize(static_cast<size_t>(n));

  // Prototypes are seeded random unit vectors, each supported on its
  // family's coordinate span: one span for scene features, one per position
  // slot. Families are therefore exactly orthogonal, which is what makes
  // decoding exact; within a family the vectors are merely incoherent.
  const int span = cfg_.dim / (cfg_.positions + 1);
  auto make_proto = [&](int index, int family, const std::string& key) {
    Rng rng(stable_hash(key, hash_combine(cfg_.world_seed, 0x9e3779b97f4aull)));
    std::vector<double> v(static_cast<size_t>(cfg_.dim), 0.0);
    double n2 = 0;
    for (int d = family * span; d < (family + 1) * span; ++d) {
      const double c = rng.normal();
      v[static_cast<size_t>(d)] = c;
      n2 += c * c;
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (auto& c : v) c *= inv;
    prototypes_[static_cast<size_t>(index)] = std::move(v);
  };

  for (int s = 0; s < cfg_.n_scenes; ++s) {
    make_proto(scene_feature(s), 0, "scene:" + std::to_string(s));
  }
  for (int p = 0; p < cfg_.positions; ++p) {
    for (EntityKind kind : {EntityKind::Character, EntityKind::Object}) {
      const int ids = kind == EntityKind::Character ? cfg_.n_characters : cfg_.n_objects;
      for (int id = 0; id < ids; ++id) {
        make_proto(identity_feature(p, kind, id), p + 1,
                   "ident:" + std::to_string(p) + ":" + std::string(entity_kind_name(kind)) + ":" +
                       std::to_string(id));
      }
    }
    for (AttrSlot slot : kAttrSlots) {
      for (int v = 0; v < cfg_.attr_values(slot); ++v) {
        make_proto(attr_feature(p, slot, v), p + 1,
                   "attr:" + std::to_string(p) + ":" + std::string(attr_slot_name(slot)) + ":" +
                       std::to_string(v));
      }
    }
  }

  gram_.assign(static_cast<size_t>(n) * static_cast<size_t>(n), 0.0);
  for (int a = 0; a < n; ++a) {
    for (int b = a; b < n; ++b) {
      double s = 0;
      for (int d = 0; d < cfg_.dim; ++d) {
        s += prototypes_[static_cast<size_t>(a)][static_cast<size_t>(d)] *
             prototypes_[static_cast<size_t>(b)][static_cast<size_t>(d)];
      }
      gram_[static_cast<size_t>(a) * static_cast<size_t>(n) + static_cast<size_t>(b)] = s;
      gram_[static_cast<size_t>(b) * static_cast<size_t>(n) + static_cast<size_t>(a)] = s;
    }
  }
}

double World::gram(int a, int b) const {
  return gram_[static_cast<size_t>(a) * static_cast<size_t>(feature_count()) + static_cast<size_t>(b)];
}

std::string_view World::character_word(int id) const { return kCharacterWords[static_cast<size_t>(id)]; }
std::string_view World::object_word(int id) const { return kObjectWords[static_cast<size_t>(id)]; }

std::string_view World::identity_word(EntityKind kind, int id) const {
  return kind == EntityKind::Character ? character_word(id) : object_word(id);
}

std::string_view World::scene_word(int id) const { return kSceneWords[static_cast<size_t>(id)]; }

std::string_view World::attr_word(AttrSlot slot, int value) const {
  switch (slot) {
    case AttrSlot::Color: return kColorWords[static_cast<size_t>(value)];
    case AttrSlot::Texture: return kTextureWords[static_cast<size_t>(value)];
    case AttrSlot::Style: return kStyleWords[static_cast<size_t>(value)];
    case AttrSlot::Pose: return kPoseWords[static_cast<size_t>(value)];
  }
  return "?";
}

std::vector<std::string> World::all_words() const {
  std::vector<std::string> words;
  for (int i = 0; i < cfg_.n_characters; ++i) words.emplace_back(character_word(i));
  for (int i = 0; i < cfg_.n_objects; ++i) words.emplace_back(object_word(i));
  for (int i = 0; i < cfg_.n_scenes; ++i) words.emplace_back(scene_word(i));
  for (AttrSlot slot : kAttrSlots) {
    for (int v = 0; v < cfg_.attr_values(slot); ++v) words.emplace_back(attr_word(slot, v));
  }
  return words;
}

void World::validate_spec(const SceneSpec& spec) const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("SceneSpec: " + msg); };
  if (spec.scene_id < 0 || spec.scene_id >= cfg_.n_scenes) fail("scene_id out of range");
  if (static_cast<int>(spec.entities.size()) > cfg_.positions) fail("too many entities");
  std::vector<bool> used(static_cast<size_t>(cfg_.positions), false);
  for (const auto& e : spec.entities) {
    if (e.position < 0 || e.position >= cfg_.positions) fail("entity position out of range");
    if (used[static_cast<size_t>(e.position)]) fail("two entities share a position slot");
    used[static_cast<size_t>(e.position)] = true;
    const int ids = e.kind == EntityKind::Character ? cfg_.n_characters : cfg_.n_objects;
    if (e.identity < 0 || e.identity >= ids) fail("identity out of range");
    if (e.attributes.size() != kAttrSlots.size()) fail("entity must carry all attribute slots");
    for (AttrSlot slot : kAttrSlots) {
      auto it = e.attributes.find(slot);
      if (it == e.attributes.end()) fail("missing attribute slot");
      if (it->second < 0 || it->second >= cfg_.attr_values(slot)) fail("attribute value out of range");
    }
  }
}

int World::feature_count() const {
  const int idents = cfg_.positions * (cfg_.n_characters + cfg_.n_objects);
  const int attrs =
      cfg_.positions * (cfg_.n_colors + cfg_.n_textures + cfg_.n_styles + cfg_.n_poses);
  return cfg_.n_scenes + idents + attrs;
}

int World::scene_feature(int scene_id) const { return scene_id; }

int World::identity_feature(int position, EntityKind kind, int identity) const {
  const int per_pos = cfg_.n_characters + cfg_.n_objects;
  const int offset = kind == EntityKind::Character ? identity : cfg_.n_characters + identity;
  return cfg_.n_scenes + position * per_pos + offset;
}

int World::attr_feature(int position, AttrSlot slot, int value) const {
  const int per_pos = cfg_.n_colors + cfg_.n_textures + cfg_.n_styles + cfg_.n_poses;
  int offset = 0;
  for (AttrSlot s : kAttrSlots) {
    if (s == slot) break;
    offset += cfg_.attr_values(s);
  }
  const int base = cfg_.n_scenes + cfg_.positions * (cfg_.n_characters + cfg_.n_objects);
  return base + position * per_pos + offset + value;
}

std::vector<int> World::active_features(const SceneSpec& spec) const {
  std::vector<int> out;
  out.push_back(scene_feature(spec.scene_id));
  for (const auto& e : spec.entities) {
    out.push_back(identity_feature(e.position, e.kind, e.identity));
    for (AttrSlot slot : kAttrSlots) {
      out.push_back(attr_feature(e.position, slot, e.attributes.at(slot)));
    }
  }
  return out;
}

const std::vector<double>& World::prototype(int feature) const {
  return prototypes_[static_cast<size_t>(feature)];
}

void World::feature_sum(const SceneSpec& spec, std::vector<double>& out) const {
  out.assign(static_cast<size_t>(cfg_.dim), 0.0);
  for (int f : active_features(spec)) {
    const auto& p = prototype(f);
    for (int d = 0; d < cfg_.dim; ++d) out[static_cast<size_t>(d)] += p[static_cast<size_t>(d)];
  }
}

ImageVec World::render_scene(const SceneSpec& spec) const {
  validate_spec(spec);
  ImageVec img;
  feature_sum(spec, img.values);
  double n2 = 0;
  for (double c : img.values) n2 += c * c;
  const double inv = 1.0 / std::sqrt(n2);
  for (auto& c : img.values) c *= inv;
  return img;
}

namespace {

// One decoded entity candidate for a position slot.
struct DecodeSlot {
  bool occupied = false;
  EntityKind kind = EntityKind::Character;
  int identity = 0;
  std::array<int, 4> attrs = {0, 0, 0, 0};
};

}  // namespace

SceneSpec World::decode_scene(const ImageVec& x) const {
  if (static_cast<int>(x.values.size()) != cfg_.dim) {
    throw std::invalid_argument("decode_scene: dimension mismatch");
  }
  for (double c : x.values) {
    if (!std::isfinite(c)) throw std::invalid_argument("decode_scene: non-finite input");
  }

  const int F = feature_count();
  std::vector<double> xs(static_cast<size_t>(F));
  for (int f = 0; f < F; ++f) {
    double s = 0;
    const auto& p = prototype(f);
    for (int d = 0; d < cfg_.dim; ++d) {
      s += x.values[static_cast<size_t>(d)] * p[static_cast<size_t>(d)];
    }
    xs[static_cast<size_t>(f)] = s;
  }

  // Families live in orthogonal coordinate spans, so the argmax over scenes
  // and the per-position block shortlists are independent subproblems; a
  // small exhaustive assembly over occupancy patterns finishes the job.
  int best_scene = 0;
  for (int s = 1; s < cfg_.n_scenes; ++s) {
    if (xs[static_cast<size_t>(scene_feature(s))] > xs[static_cast<size_t>(scene_feature(best_scene))]) {
      best_scene = s;
    }
  }

  struct BlockCand {
    double dot_x = 0;   // <x, B>
    double norm2 = 0;   // ||B||^2
    DecodeSlot slot;
  };
  constexpr int kShortlist = 4;
  std::vector<std::vector<BlockCand>> cands(static_cast<size_t>(cfg_.positions));

  for (int p = 0; p < cfg_.positions; ++p) {
    auto& top = cands[static_cast<size_t>(p)];
    auto offer = [&](const BlockCand& c) {
      const double score = c.dot_x / std::sqrt(c.norm2);
      if (static_cast<int>(top.size()) < kShortlist) {
        top.push_back(c);
      } else {
        int worst = 0;
        double worst_score = top[0].dot_x / std::sqrt(top[0].norm2);
        for (int i = 1; i < kShortlist; ++i) {
          const double s = top[static_cast<size_t>(i)].dot_x / std::sqrt(top[static_cast<size_t>(i)].norm2);
          if (s < worst_score) {
            worst_score = s;
            worst = i;
          }
        }
        if (score > worst_score) top[static_cast<size_t>(worst)] = c;
      }
    };

    for (EntityKind kind : {EntityKind::Character, EntityKind::Object}) {
      const int ids = kind == EntityKind::Character ? cfg_.n_characters : cfg_.n_objects;
      for (int id = 0; id < ids; ++id) {
        const int fi = identity_feature(p, kind, id);
        const double x_i = xs[static_cast<size_t>(fi)];
        for (int c = 0; c < cfg_.n_colors; ++c) {
          const int fc = attr_feature(p, AttrSlot::Color, c);
          const double x_c = x_i + xs[static_cast<size_t>(fc)];
          const double g_c = gram(fi, fc);
          for (int t = 0; t < cfg_.n_textures; ++t) {
            const int ft = attr_feature(p, AttrSlot::Texture, t);
            const double x_t = x_c + xs[static_cast<size_t>(ft)];
            const double g_t = g_c + gram(fi, ft) + gram(fc, ft);
            for (int sy = 0; sy < cfg_.n_styles; ++sy) {
              const int fs = attr_feature(p, AttrSlot::Style, sy);
              const double x_s = x_t + xs[static_cast<size_t>(fs)];
              const double g_s = g_t + gram(fi, fs) + gram(fc, fs) + gram(ft, fs);
              for (int po = 0; po < cfg_.n_poses; ++po) {
                const int fp = attr_feature(p, AttrSlot::Pose, po);
                BlockCand cand;
                cand.dot_x = x_s + xs[static_cast<size_t>(fp)];
                cand.norm2 = 5.0 + 2.0 * (g_s + gram(fi, fp) + gram(fc, fp) + gram(ft, fp) +
                                          gram(fs, fp));
                cand.slot.occupied = true;
                cand.slot.kind = kind;
                cand.slot.identity = id;
                cand.slot.attrs = {c, t, sy, po};
                offer(cand);
              }
            }
          }
        }
      }
    }
  }

  // exhaustive occupancy assembly: empty or one shortlisted block per slot
  std::vector<int> choice(static_cast<size_t>(cfg_.positions), -1);
  std::vector<int> best_choice = choice;
  double best_obj = -1e300;
  const double scene_dot = xs[static_cast<size_t>(scene_feature(best_scene))];
  while (true) {
    double num = scene_dot, den2 = 1.0;
    for (int p = 0; p < cfg_.positions; ++p) {
      const int c = choice[static_cast<size_t>(p)];
      if (c >= 0) {
        const BlockCand& b = cands[static_cast<size_t>(p)][static_cast<size_t>(c)];
        num += b.dot_x;
        den2 += b.norm2;
      }
    }
    const double obj = num / std::sqrt(den2);
    if (obj > best_obj) {
      best_obj = obj;
      best_choice = choice;
    }
    // next combination
    int p = 0;
    while (p < cfg_.positions) {
      ++choice[static_cast<size_t>(p)];
      if (choice[static_cast<size_t>(p)] <
          static_cast<int>(cands[static_cast<size_t>(p)].size())) {
        break;
      }
      choice[static_cast<size_t>(p)] = -1;
      ++p;
    }
    if (p == cfg_.positions) break;
  }

  SceneSpec spec;
  spec.scene_id = best_scene;
  for (int p = 0; p < cfg_.positions; ++p) {
    const int c = best_choice[static_cast<size_t>(p)];
    if (c < 0) continue;
    const DecodeSlot& s = cands[static_cast<size_t>(p)][static_cast<size_t>(c)].slot;
    EntityInstance e;
    e.kind = s.kind;
    e.identity = s.identity;
    e.position = p;
    for (size_t a = 0; a < kAttrSlots.size(); ++a) e.attributes[kAttrSlots[a]] = s.attrs[a];
    spec.entities.push_back(std::move(e));
  }
  return spec;
}

std::string World::caption_of(const SceneSpec& spec) const {
  validate_spec(spec);
  std::ostringstream out;
  out << "a " << scene_word(spec.scene_id) << " scene";
  std::vector<const EntityInstance*> ordered;
  for (const auto& e : spec.entities) ordered.push_back(&e);
  std::sort(ordered.begin(), ordered.end(),
            [](const EntityInstance* a, const EntityInstance* b) { return a->position < b->position; });
  for (size_t i = 0; i < ordered.size(); ++i) {
    const EntityInstance& e = *ordered[i];
    out << (i == 0 ? " with" : " and");
    out << " a " << attr_word(AttrSlot::Color, e.attributes.at(AttrSlot::Color)) << " "
        << attr_word(AttrSlot::Texture, e.attributes.at(AttrSlot::Texture)) << " "
        << attr_word(AttrSlot::Style, e.attributes.at(AttrSlot::Style)) << " "
        << identity_word(e.kind, e.identity) << " "
        << attr_word(AttrSlot::Pose, e.attributes.at(AttrSlot::Pose)) << " at slot " << e.position;
  }
  return out.str();
}

World::CaptionParse World::parse_caption(std::string_view caption) const {
  std::vector<std::string> tokens;
  {
    std::istringstream in{std::string(caption)};
    std::string t;
    while (in >> t) tokens.push_back(t);
  }
  CaptionParse result;
  SceneSpec& spec = result.spec;
  spec.scene_id = -1;
  bool full = false;
  size_t i = 0;

  auto lookup = [](auto const& pool, int limit, const std::string& w) -> int {
    for (int idx = 0; idx < limit; ++idx) {
      if (pool[static_cast<size_t>(idx)] == w) return idx;
    }
    return -1;
  };

  do {
    if (i >= tokens.size() || tokens[i++] != "a") break;
    if (i >= tokens.size()) break;
    const int scene = lookup(kSceneWords, cfg_.n_scenes, tokens[i]);
    if (scene < 0) break;
    ++i;
    if (i >= tokens.size() || tokens[i++] != "scene") break;
    spec.scene_id = scene;
    full = true;

    if (i < tokens.size()) {
      full = tokens[i] == "with";
      if (!full) break;
      ++i;
      while (true) {
        // a COLOR TEXTURE STYLE IDENT POSE at slot N
        full = false;
        if (i + 9 > tokens.size() || tokens[i] != "a") break;
        const int color = lookup(kColorWords, cfg_.n_colors, tokens[i + 1]);
        const int texture = lookup(kTextureWords, cfg_.n_textures, tokens[i + 2]);
        const int style = lookup(kStyleWords, cfg_.n_styles, tokens[i + 3]);
        EntityKind kind = EntityKind::Character;
        int identity = lookup(kCharacterWords, cfg_.n_characters, tokens[i + 4]);
        if (identity < 0) {
          identity = lookup(kObjectWords, cfg_.n_objects, tokens[i + 4]);
          kind = EntityKind::Object;
        }
        const int pose = lookup(kPoseWords, cfg_.n_poses, tokens[i + 5]);
        if (color < 0 || texture < 0 || style < 0 || identity < 0 || pose < 0 ||
            tokens[i + 6] != "at" || tokens[i + 7] != "slot") {
          break;
        }
        int position = -1;
        {
          const std::string& ptok = tokens[i + 8];
          auto [p, ec] = std::from_chars(ptok.data(), ptok.data() + ptok.size(), position);
          if (ec != std::errc{} || p != ptok.data() + ptok.size()) break;
        }
        if (position < 0 || position >= cfg_.positions) break;
        bool taken = false;
        for (const auto& e : spec.entities) taken = taken || e.position == position;
        if (taken) break;

        EntityInstance e;
        e.kind = kind;
        e.identity = identity;
        e.position = position;
        e.attributes[AttrSlot::Color] = color;
        e.attributes[AttrSlot::Texture] = texture;
        e.attributes[AttrSlot::Style] = style;
        e.attributes[AttrSlot::Pose] = pose;
        spec.entities.push_back(std::move(e));
        i += 9;
        full = true;
        if (i >= tokens.size()) break;
        full = tokens[i] == "and";
        if (!full) break;
        ++i;
      }
    }
  } while (false);

  if (spec.scene_id < 0) {
    // nothing parsed at all
    spec.scene_id = 0;
    spec.entities.clear();
    return result;
  }
  result.scene_parsed = true;
  result.complete = full && i >= tokens.size();
  std::sort(spec.entities.begin(), spec.entities.end(),
            [](const EntityInstance& a, const EntityInstance& b) { return a.position < b.position; });
  return result;
}

// ---------------------------------------------------------------------------
// Task sampling

namespace {

struct IdentPool {
  std::vector<std::pair<EntityKind, int>> remaining;

  IdentPool(const WorldConfig& cfg, Rng& rng) {
    const int total = cfg.n_characters + cfg.n_objects;
    for (int i : sample_distinct(rng, total, total)) {
      if (i < cfg.n_characters) {
        remaining.emplace_back(EntityKind::Character, i);
      } else {
        remaining.emplace_back(EntityKind::Object, i - cfg.n_characters);
      }
    }
  }

  std::pair<EntityKind, int> draw() {
    auto out = remaining.back();
    remaining.pop_back();
    return out;
  }
};

}  // namespace

TaskInstance World::sample_task(TaskKind kind, Rng& rng) const {
  const int P = cfg_.positions;
  auto require = [&](bool ok, const std::string& msg) {
    if (!ok) throw std::domain_error("sample_task(" + std::string(task_kind_name(kind)) + "): " + msg);
  };
  require(cfg_.n_characters + cfg_.n_objects >= 5, "identity pool too small");

  TaskInstance task;
  task.kind = kind;
  task.index_free = rng.bernoulli(cfg_.ambiguity_rate);

  IdentPool pool(cfg_, rng);

  auto random_attrs = [&](EntityInstance& e) {
    for (AttrSlot slot : kAttrSlots) e.attributes[slot] = rng.uniform_int(cfg_.attr_values(slot));
  };

  auto subject_ref = [&]() {
    Reference ref;
    ref.role = RefRole::SubjectSource;
    ref.spec.scene_id = rng.uniform_int(cfg_.n_scenes);
    EntityInstance e;
    std::tie(e.kind, e.identity) = pool.draw();
    e.position = rng.uniform_int(P);
    random_attrs(e);
    ref.spec.entities.push_back(e);
    ref.image = render_scene(ref.spec);
    return ref;
  };

  auto scene_ref = [&](int exclude_scene) {
    Reference ref;
    ref.role = RefRole::SceneSource;
    do {
      ref.spec.scene_id = rng.uniform_int(cfg_.n_scenes);
    } while (ref.spec.scene_id == exclude_scene);
    ref.image = render_scene(ref.spec);
    return ref;
  };

  auto base_ref = [&](int n_entities) {
    Reference ref;
    ref.role = RefRole::EditBase;
    ref.spec.scene_id = rng.uniform_int(cfg_.n_scenes);
    const std::vector<int> positions = sample_distinct(rng, P, n_entities);
    for (int p : positions) {
      EntityInstance e;
      std::tie(e.kind, e.identity) = pool.draw();
      e.position = p;
      random_attrs(e);
      ref.spec.entities.push_back(e);
    }
    std::sort(ref.spec.entities.begin(), ref.spec.entities.end(),
              [](const EntityInstance& a, const EntityInstance& b) { return a.position < b.position; });
    ref.image = render_scene(ref.spec);
    return ref;
  };

  auto req_scene = [](int scene) {
    SceneProperty p;
    p.kind = SceneProperty::Kind::SceneIs;
    p.scene_id = scene;
    return p;
  };
  auto req_ident = [](const EntityInstance& e, bool present) {
    SceneProperty p;
    p.kind = present ? SceneProperty::Kind::IdentPresent : SceneProperty::Kind::IdentAbsent;
    p.entity_kind = e.kind;
    p.identity = e.identity;
    return p;
  };
  auto req_attr = [](const EntityInstance& e, AttrSlot slot, int value) {
    SceneProperty p;
    p.kind = SceneProperty::Kind::AttrIs;
    p.entity_kind = e.kind;
    p.identity = e.identity;
    p.slot = slot;
    p.value = value;
    return p;
  };
  auto subject_consistency = [&](const EntityInstance& e) {
    task.consistency_features.push_back(req_ident(e, true));
    for (AttrSlot slot : kAttrSlots) {
      task.consistency_features.push_back(req_attr(e, slot, e.attributes.at(slot)));
    }
  };

  // "the subject from image k" / "the <name> in image 1" fragments
  auto subj_from = [&](int ref_index) {
    return "the subject from image " + std::to_string(ref_index + 1);
  };

  std::ostringstream instr;

  switch (kind) {
    case TaskKind::SubjectDriven: {
      task.refs.push_back(subject_ref());
      const EntityInstance subject = task.refs[0].spec.entities[0];
      const int scene = rng.uniform_int(cfg_.n_scenes);
      if (task.index_free) {
        instr << "depict this subject in a " << scene_word(scene) << " scene";
      } else {
        instr << "depict " << subj_from(0) << " in a " << scene_word(scene) << " scene";
      }
      task.gt_spec.scene_id = scene;
      EntityInstance placed = subject;
      placed.position = 0;
      task.gt_spec.entities.push_back(placed);
      task.requirements.push_back(req_scene(scene));
      task.requirements.push_back(req_ident(subject, true));
      subject_consistency(subject);
      break;
    }
    case TaskKind::SubjectSubject: {
      require(P >= 2, "needs at least two position slots");
      const int n = 2 + (P >= 3 ? rng.uniform_int(2) : 0);
      for (int i = 0; i < n; ++i) task.refs.push_back(subject_ref());
      const int scene = rng.uniform_int(cfg_.n_scenes);
      if (task.index_free) {
        instr << "put them together in a " << scene_word(scene) << " scene";
      } else {
        instr << "put ";
        for (int i = 0; i < n; ++i) instr << (i ? " and " : "") << subj_from(i);
        instr << " together in a " << scene_word(scene) << " scene";
      }
      task.gt_spec.scene_id = scene;
      task.requirements.push_back(req_scene(scene));
      for (int i = 0; i < n; ++i) {
        EntityInstance placed = task.refs[static_cast<size_t>(i)].spec.entities[0];
        placed.position = i;
        task.gt_spec.entities.push_back(placed);
        task.requirements.push_back(req_ident(placed, true));
        subject_consistency(placed);
      }
      break;
    }
    case TaskKind::SubjectScene: {
      const int n = 1 + rng.uniform_int(std::min(3, P));
      const int scene_at = rng.uniform_int(n + 1);
      std::vector<int> subject_idx;
      for (int i = 0; i < n + 1; ++i) {
        if (i == scene_at) {
          task.refs.push_back(scene_ref(-1));
        } else {
          task.refs.push_back(subject_ref());
          subject_idx.push_back(i);
        }
      }
      const int scene = task.refs[static_cast<size_t>(scene_at)].spec.scene_id;
      if (task.index_free) {
        instr << (n == 1 ? "place this subject into this scene" : "place them into this scene");
      } else {
        instr << "place ";
        for (size_t i = 0; i < subject_idx.size(); ++i) {
          instr << (i ? " and " : "") << subj_from(subject_idx[i]);
        }
        instr << " into the scene from image " << (scene_at + 1);
      }
      task.gt_spec.scene_id = scene;
      task.requirements.push_back(req_scene(scene));
      task.consistency_features.push_back(req_scene(scene));
      int next_pos = 0;
      for (int i : subject_idx) {
        EntityInstance placed = task.refs[static_cast<size_t>(i)].spec.entities[0];
        placed.position = next_pos++;
        task.gt_spec.entities.push_back(placed);
        task.requirements.push_back(req_ident(placed, true));
        subject_consistency(placed);
      }
      break;
    }
    case TaskKind::RefSubjectAdd: {
      require(P >= 2, "needs a free position slot");
      task.refs.push_back(base_ref(1 + rng.uniform_int(P - 1)));
      task.refs.push_back(subject_ref());
      const Reference& base = task.refs[0];
      EntityInstance added = task.refs[1].spec.entities[0];
      if (task.index_free) {
        instr << "add this subject to the picture";
      } else {
        instr << "add " << subj_from(1) << " to image 1";
      }
      task.gt_spec = base.spec;
      std::vector<bool> used(static_cast<size_t>(P), false);
      for (const auto& e : base.spec.entities) used[static_cast<size_t>(e.position)] = true;
      for (int p = 0; p < P; ++p) {
        if (!used[static_cast<size_t>(p)]) {
          added.position = p;
          break;
        }
      }
      task.gt_spec.entities.push_back(added);
      std::sort(task.gt_spec.entities.begin(), task.gt_spec.entities.end(),
                [](const EntityInstance& a, const EntityInstance& b) { return a.position < b.position; });
      task.requirements.push_back(req_ident(added, true));
      task.consistency_features.push_back(req_scene(base.spec.scene_id));
      for (const auto& e : base.spec.entities) subject_consistency(e);
      subject_consistency(added);
      break;
    }
    case TaskKind::RefSubjectReplace: {
      const int base_n = task.index_free ? 1 : 1 + rng.uniform_int(P);
      task.refs.push_back(base_ref(base_n));
      task.refs.push_back(subject_ref());
      const Reference& base = task.refs[0];
      const int victim = rng.uniform_int(base_n);
      const EntityInstance old_entity = base.spec.entities[static_cast<size_t>(victim)];
      EntityInstance incoming = task.refs[1].spec.entities[0];
      incoming.position = old_entity.position;
      if (task.index_free) {
        instr << "replace the subject with the new one";
      } else {
        instr << "replace the " << identity_word(old_entity.kind, old_entity.identity)
              << " in image 1 with " << subj_from(1);
      }
      task.gt_spec = base.spec;
      task.gt_spec.entities[static_cast<size_t>(victim)] = incoming;
      task.requirements.push_back(req_ident(old_entity, false));
      task.requirements.push_back(req_ident(incoming, true));
      task.consistency_features.push_back(req_scene(base.spec.scene_id));
      for (size_t i = 0; i < base.spec.entities.size(); ++i) {
        if (static_cast<int>(i) != victim) subject_consistency(base.spec.entities[i]);
      }
      subject_consistency(incoming);
      break;
    }
    case TaskKind::RefAttributeLocal: {
      const int base_n = task.index_free ? 1 : 1 + rng.uniform_int(P);
      task.refs.push_back(base_ref(base_n));
      task.refs.push_back(subject_ref());
      task.refs[1].role = RefRole::AttributeSource;
      Reference& source = task.refs[1];
      const int victim = rng.uniform_int(base_n);
      const EntityInstance target = task.refs[0].spec.entities[static_cast<size_t>(victim)];
      const AttrSlot slot = kAttrSlots[static_cast<size_t>(rng.uniform_int(4))];
      // force a real edit: the transferred value must differ
      if (source.spec.entities[0].attributes[slot] == target.attributes.at(slot)) {
        const int n_vals = cfg_.attr_values(slot);
        int v = rng.uniform_int(n_vals - 1);
        if (v >= target.attributes.at(slot)) ++v;
        source.spec.entities[0].attributes[slot] = v;
        source.image = render_scene(source.spec);
      }
      const int value = source.spec.entities[0].attributes[slot];
      if (task.index_free) {
        instr << "give the subject this " << attr_slot_name(slot);
      } else {
        instr << "give the " << identity_word(target.kind, target.identity) << " in image 1 the "
              << attr_slot_name(slot) << " of the subject in image 2";
      }
      task.gt_spec = task.refs[0].spec;
      task.gt_spec.entities[static_cast<size_t>(victim)].attributes[slot] = value;
      task.requirements.push_back(req_attr(target, slot, value));
      task.consistency_features.push_back(req_scene(task.refs[0].spec.scene_id));
      for (size_t i = 0; i < task.refs[0].spec.entities.size(); ++i) {
        const EntityInstance& e = task.refs[0].spec.entities[i];
        if (static_cast<int>(i) == victim) {
          task.consistency_features.push_back(req_ident(e, true));
          for (AttrSlot s : kAttrSlots) {
            const int v = s == slot ? value : e.attributes.at(s);
            task.consistency_features.push_back(req_attr(e, s, v));
          }
        } else {
          subject_consistency(e);
        }
      }
      break;
    }
    case TaskKind::RefAttributeGlobal: {
      const int base_n = 1 + rng.uniform_int(P);
      task.refs.push_back(base_ref(base_n));
      task.refs.push_back(subject_ref());
      task.refs[1].role = RefRole::AttributeSource;
      Reference& source = task.refs[1];
      const AttrSlot slot = kAttrSlots[static_cast<size_t>(rng.uniform_int(4))];
      if (source.spec.entities[0].attributes[slot] ==
          task.refs[0].spec.entities[0].attributes.at(slot)) {
        const int n_vals = cfg_.attr_values(slot);
        int v = rng.uniform_int(n_vals - 1);
        if (v >= task.refs[0].spec.entities[0].attributes.at(slot)) ++v;
        source.spec.entities[0].attributes[slot] = v;
        source.image = render_scene(source.spec);
      }
      const int value = source.spec.entities[0].attributes[slot];
      if (task.index_free) {
        instr << "apply this " << attr_slot_name(slot) << " everywhere";
      } else {
        instr << "apply the " << attr_slot_name(slot)
              << " of the subject in image 2 to everything in image 1";
      }
      task.gt_spec = task.refs[0].spec;
      task.consistency_features.push_back(req_scene(task.refs[0].spec.scene_id));
      for (auto& e : task.gt_spec.entities) {
        e.attributes[slot] = value;
        task.requirements.push_back(req_attr(e, slot, value));
        task.consistency_features.push_back(req_ident(e, true));
        for (AttrSlot s : kAttrSlots) {
          task.consistency_features.push_back(req_attr(e, s, e.attributes.at(s)));
        }
      }
      break;
    }
    case TaskKind::RefSceneEdit: {
      task.refs.push_back(base_ref(1 + rng.uniform_int(P)));
      task.refs.push_back(scene_ref(task.refs[0].spec.scene_id));
      const int scene = task.refs[1].spec.scene_id;
      if (task.index_free) {
        instr << "move this into the new scene";
      } else {
        instr << "change the scene of image 1 to the scene from image 2";
      }
      task.gt_spec = task.refs[0].spec;
      task.gt_spec.scene_id = scene;
      task.requirements.push_back(req_scene(scene));
      task.consistency_features.push_back(req_scene(scene));
      for (const auto& e : task.refs[0].spec.entities) subject_consistency(e);
      break;
    }
  }

  task.instruction = instr.str();
  task.gt_image = render_scene(task.gt_spec);
  task.gt_trace = oracle_trace(task);
  return task;
}

ReasoningTrace World::oracle_trace(const TaskInstance& task) const {
  std::vector<std::string> relations;
  relations.reserve(task.refs.size());

  // slot of attribute-transfer tasks, recovered from the parsed semantics
  std::string slot_word;
  for (const auto& r : task.requirements) {
    if (r.kind == SceneProperty::Kind::AttrIs) {
      slot_word = attr_slot_name(r.slot);
      break;
    }
  }

  for (const auto& ref : task.refs) {
    switch (ref.role) {
      case RefRole::EditBase:
        relations.emplace_back("is the image to edit");
        break;
      case RefRole::SceneSource:
        relations.emplace_back("provides the scene to use");
        break;
      case RefRole::AttributeSource:
        relations.emplace_back("provides the " + slot_word + " attribute to transfer");
        break;
      case RefRole::SubjectSource:
        switch (task.kind) {
          case TaskKind::SubjectDriven:
            relations.emplace_back("provides the subject to depict");
            break;
          case TaskKind::RefSubjectAdd:
            relations.emplace_back("provides the subject to add");
            break;
          case TaskKind::RefSubjectReplace:
            relations.emplace_back("provides the replacement subject");
            break;
          case TaskKind::RefAttributeLocal:
          case TaskKind::RefAttributeGlobal:
            relations.emplace_back("provides the " + slot_word + " attribute to transfer");
            break;
          default:
            relations.emplace_back("provides a subject to place");
            break;
        }
        break;
    }
  }
  return make_trace(caption_of(task.gt_spec), std::move(relations));
}

}  // namespace icfg
