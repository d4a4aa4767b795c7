#include "icfg/embed.hpp"

#include <algorithm>
#include <cmath>

namespace icfg {

double cosine(const FeatVec& a, const FeatVec& b) {
  double ab = 0, aa = 0, bb = 0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    ab += a.values[i] * b.values[i];
    aa += a.values[i] * a.values[i];
    bb += b.values[i] * b.values[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

FeatVec DualEncoder::embed_image(const ImageVec& x) const {
  FeatVec f;
  f.values.assign(static_cast<size_t>(feature_dim()), 0.0);
  const SceneSpec spec = world_->decode_scene(x);
  for (int feat : world_->active_features(spec)) f.values[static_cast<size_t>(feat)] = 1.0;
  return f;
}

FeatVec DualEncoder::embed_text(std::string_view caption) const {
  FeatVec f;
  f.values.assign(static_cast<size_t>(feature_dim()), 0.0);
  const World::CaptionParse parsed = world_->parse_caption(caption);
  if (parsed.scene_parsed) {
    for (int feat : world_->active_features(parsed.spec)) f.values[static_cast<size_t>(feat)] = 1.0;
  }
  if (!parsed.complete) f.values[static_cast<size_t>(unparsed_flag_index())] = 1.0;
  return f;
}

double DualEncoder::surrogate_reward(const ImageVec& x, std::string_view caption,
                                     bool* degenerate) const {
  if (degenerate) *degenerate = false;
  const FeatVec e = embed_image(x);
  const FeatVec t = embed_text(caption);
  double ee = 0, tt = 0;
  for (double v : e.values) ee += v * v;
  for (double v : t.values) tt += v * v;
  if (ee == 0.0 || tt == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return cosine(e, t);
}

double DualEncoder::quality_score(const ImageVec& x) const {
  const SceneSpec nearest = world_->decode_scene(x);
  const double c = cosine(x, world_->render_scene(nearest));
  return std::clamp(c, 0.0, 1.0);
}

}  // namespace icfg
