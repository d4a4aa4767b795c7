#ifndef ICFG_WORLD_HPP_
#define ICFG_WORLD_HPP_

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "icfg/iccot.hpp"
#include "icfg/rng.hpp"

namespace icfg {

enum class EntityKind { Character, Object };
enum class AttrSlot { Color, Texture, Style, Pose };

constexpr std::array<AttrSlot, 4> kAttrSlots = {AttrSlot::Color, AttrSlot::Texture,
                                                AttrSlot::Style, AttrSlot::Pose};

std::string_view entity_kind_name(EntityKind k);
std::string_view attr_slot_name(AttrSlot s);

struct EntityInstance {
  EntityKind kind = EntityKind::Character;
  int identity = 0;
  std::map<AttrSlot, int> attributes;  // fully populated: one value per slot
  int position = 0;

  bool operator==(const EntityInstance&) const = default;
};

// Symbolic description of an image: a scene plus entities in position slots.
struct SceneSpec {
  int scene_id = 0;
  std::vector<EntityInstance> entities;  // kept sorted by position

  bool operator==(const SceneSpec&) const = default;
};

struct ImageVec {
  std::vector<double> values;

  bool operator==(const ImageVec&) const = default;
};

double dot(const ImageVec& a, const ImageVec& b);
double norm(const ImageVec& a);
double cosine(const ImageVec& a, const ImageVec& b);

struct WorldConfig {
  int dim = 32;        // D
  int positions = 3;   // P
  int n_characters = 8;
  int n_objects = 8;
  int n_scenes = 4;
  int n_colors = 6;
  int n_textures = 4;
  int n_styles = 4;
  int n_poses = 4;
  uint64_t world_seed = 17;
  double ambiguity_rate = 0.25;

  void validate() const;  // throws std::invalid_argument
  int attr_values(AttrSlot slot) const;
};

enum class TaskKind {
  SubjectDriven,
  SubjectSubject,
  SubjectScene,
  RefSubjectAdd,
  RefSubjectReplace,
  RefAttributeLocal,
  RefAttributeGlobal,
  RefSceneEdit,
};

constexpr std::array<TaskKind, 8> kTaskKinds = {
    TaskKind::SubjectDriven,     TaskKind::SubjectSubject,   TaskKind::SubjectScene,
    TaskKind::RefSubjectAdd,     TaskKind::RefSubjectReplace, TaskKind::RefAttributeLocal,
    TaskKind::RefAttributeGlobal, TaskKind::RefSceneEdit,
};

std::string_view task_kind_name(TaskKind k);
std::optional<TaskKind> task_kind_from_name(std::string_view name);

// A position-agnostic property of a SceneSpec. Used both for the
// instruction-derived requirements (prompt following) and for the
// reference-derived features (subject consistency).
struct SceneProperty {
  enum class Kind { SceneIs, IdentPresent, IdentAbsent, AttrIs } kind;
  int scene_id = -1;
  EntityKind entity_kind = EntityKind::Character;
  int identity = -1;
  AttrSlot slot = AttrSlot::Color;
  int value = -1;

  bool satisfied_by(const SceneSpec& spec) const;
};

enum class RefRole { SubjectSource, SceneSource, AttributeSource, EditBase };

struct Reference {
  ImageVec image;
  SceneSpec spec;  // hidden ground truth behind the image
  RefRole role = RefRole::SubjectSource;
};

// One in-context generation/editing problem.
struct TaskInstance {
  TaskKind kind = TaskKind::SubjectDriven;
  std::vector<Reference> refs;
  std::string instruction;
  bool index_free = false;  // instruction uses no image indices
  SceneSpec gt_spec;
  ImageVec gt_image;
  ReasoningTrace gt_trace;
  std::vector<SceneProperty> requirements;         // what the instruction demands
  std::vector<SceneProperty> consistency_features; // what the refs contribute
};

// Deterministic symbolic world: renderer, exact decoder, task sampler and
// oracle reasoning traces. All randomness is drawn from caller-provided
// streams; the prototype dictionary depends only on world_seed.
class World {
 public:
  explicit World(WorldConfig cfg);

  const WorldConfig& config() const { return cfg_; }

  // Vocabulary words (stable across runs; config sizes select prefixes).
  std::string_view character_word(int id) const;
  std::string_view object_word(int id) const;
  std::string_view identity_word(EntityKind kind, int id) const;
  std::string_view scene_word(int id) const;
  std::string_view attr_word(AttrSlot slot, int value) const;
  std::vector<std::string> all_words() const;

  void validate_spec(const SceneSpec& spec) const;  // throws on violations

  ImageVec render_scene(const SceneSpec& spec) const;
  SceneSpec decode_scene(const ImageVec& x) const;

  // Canonical caption: "a <scene> scene" or
  // "a <scene> scene with a <color> <texture> <style> <ident> <pose> at slot <p> and ...".
  std::string caption_of(const SceneSpec& spec) const;

  // Partial caption parse for the text encoder: consumes as many well-formed
  // clauses as possible.
  struct CaptionParse {
    bool scene_parsed = false;  // the leading "a <scene> scene" clause parsed
    bool complete = false;      // the whole caption parsed with nothing left
    SceneSpec spec;             // valid only where scene_parsed
  };
  CaptionParse parse_caption(std::string_view caption) const;

  TaskInstance sample_task(TaskKind kind, Rng& rng) const;
  ReasoningTrace oracle_trace(const TaskInstance& task) const;

  // Sum of prototypes for the spec's active features, not normalized.
  void feature_sum(const SceneSpec& spec, std::vector<double>& out) const;

  // Stable dense indexing over the full feature dictionary (for the
  // indicator embeddings). Scene features first, then identity, then
  // attribute features.
  int feature_count() const;
  int scene_feature(int scene_id) const;
  int identity_feature(int position, EntityKind kind, int identity) const;
  int attr_feature(int position, AttrSlot slot, int value) const;
  std::vector<int> active_features(const SceneSpec& spec) const;

 private:
  const std::vector<double>& prototype(int feature) const;
  double gram(int a, int b) const;

  WorldConfig cfg_;
  std::vector<std::vector<double>> prototypes_;  // one unit vector per feature
  std::vector<double> gram_;                     // pairwise prototype dot products
};

}  // namespace icfg

#endif  // ICFG_WORLD_HPP_
