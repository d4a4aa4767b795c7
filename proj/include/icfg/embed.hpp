#ifndef ICFG_EMBED_HPP_
#define ICFG_EMBED_HPP_

#include <string_view>
#include <vector>

#include "icfg/world.hpp"

namespace icfg {

struct FeatVec {
  std::vector<double> values;
};

double cosine(const FeatVec& a, const FeatVec& b);

// Deterministic stand-in for a CLIP-style dual encoder. Images and captions
// map into a shared indicator-feature space: one component per dictionary
// feature of the world, plus one flag component for text that did not parse.
class DualEncoder {
 public:
  explicit DualEncoder(const World& world) : world_(&world) {}

  int feature_dim() const { return world_->feature_count() + 1; }
  int unparsed_flag_index() const { return world_->feature_count(); }

  // Snaps the image to its nearest renderable spec and emits that spec's
  // bag-of-features indicator.
  FeatVec embed_image(const ImageVec& x) const;

  // Total on arbitrary strings: parses what it can of the caption grammar
  // and raises the UnparsedFlag component for anything left over.
  FeatVec embed_text(std::string_view caption) const;

  // Eq.-style cosine reward between the image and caption embeddings,
  // in [-1, 1]. Returns 0 (and sets *degenerate) if either embedding is
  // the zero vector, which the encoder contracts rule out.
  double surrogate_reward(const ImageVec& x, std::string_view caption,
                          bool* degenerate = nullptr) const;

  // Proximity of x to the manifold of renderable scenes, clamped to [0, 1].
  double quality_score(const ImageVec& x) const;

 private:
  const World* world_;
};

}  // namespace icfg

#endif  // ICFG_EMBED_HPP_
