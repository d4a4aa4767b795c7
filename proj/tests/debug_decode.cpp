// scratch probe, not part of the suite
#include <cstdio>

#include "icfg/rng.hpp"
#include "icfg/world.hpp"

using namespace icfg;

static SceneSpec random_spec(const World& world, Rng& rng) {
  const WorldConfig& cfg = world.config();
  SceneSpec spec;
  spec.scene_id = rng.uniform_int(cfg.n_scenes);
  const int n = rng.uniform_int(cfg.positions + 1);
  std::vector<int> positions;
  for (int p = 0; p < cfg.positions; ++p) positions.push_back(p);
  for (int i = 0; i < n; ++i) {
    const int j = i + rng.uniform_int(cfg.positions - i);
    std::swap(positions[(size_t)i], positions[(size_t)j]);
  }
  for (int i = 0; i < n; ++i) {
    EntityInstance e;
    e.kind = rng.bernoulli(0.5) ? EntityKind::Character : EntityKind::Object;
    e.identity = rng.uniform_int(e.kind == EntityKind::Character ? cfg.n_characters : cfg.n_objects);
    e.position = positions[(size_t)i];
    for (AttrSlot slot : kAttrSlots) e.attributes[slot] = rng.uniform_int(cfg.attr_values(slot));
    spec.entities.push_back(e);
  }
  std::sort(spec.entities.begin(), spec.entities.end(),
            [](const EntityInstance& a, const EntityInstance& b) { return a.position < b.position; });
  return spec;
}

static void describe(const World& w, const SceneSpec& s, const char* tag) {
  std::printf("%s: scene=%d entities=%zu [", tag, s.scene_id, s.entities.size());
  for (const auto& e : s.entities) {
    std::printf(" (p%d %s id%d c%d t%d s%d q%d)", e.position,
                e.kind == EntityKind::Character ? "chr" : "obj", e.identity,
                e.attributes.at(AttrSlot::Color), e.attributes.at(AttrSlot::Texture),
                e.attributes.at(AttrSlot::Style), e.attributes.at(AttrSlot::Pose));
  }
  std::printf(" ]\n");
}

int main() {
  World world{WorldConfig{}};
  Rng rng(123);
  int fails = 0;
  for (int i = 0; i < 1000; ++i) {
    const SceneSpec spec = random_spec(world, rng);
    const SceneSpec dec = world.decode_scene(world.render_scene(spec));
    if (!(dec == spec)) {
      ++fails;
      if (fails <= 5) {
        std::printf("--- fail %d (case %d)\n", fails, i);
        describe(world, spec, "truth");
        describe(world, dec, "decoded");
        std::printf("cos(render(truth), render(decoded)) = %.6f\n",
                    cosine(world.render_scene(spec), world.render_scene(dec)));
      }
    }
  }
  std::printf("failures: %d / 1000\n", fails);
  return 0;
}
