#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rfm/random.hpp"
#include "rfm/tensor.hpp"

// Procedural camouflage benchmark: textured scenes hiding a category-signed
// object, salient reference renderings per category, synthetic sentence
// embeddings, and the on-disk dataset layout.
namespace rfm::synth {

inline constexpr int kTextDim = 64;

/// Per-category appearance: a chroma direction and a shape family.
struct CategorySignature {
  double hue = 0.0;       // radians in the chroma plane
  int lobes = 2;          // dominant boundary harmonic
  double lobe_amp = 0.1;  // its relative amplitude
};

CategorySignature category_signature(int category, int num_categories);

struct SceneSpec {
  int category_id = 0;
  int num_categories = 8;
  std::uint64_t seed = 0;  // texture and geometry seed
  double scale = 0.2;      // nominal object area as a fraction of the image, in [0.1, 0.4]
  double camouflage_strength = 0.85;  // 1 = object texture equals background
  int image_size = 64;
  bool decoy = true;  // unlabeled patch carrying another category's signature
};

struct Scene {
  Tensor image;  // [3,S,S] in [0,1]
  Tensor mask;   // [1,S,S] binary
  double area_fraction = 0.0;
  int decoy_category = -1;
  int retries = 0;
};

/// Deterministic in the spec. Degenerate geometry is re-drawn with a retry
/// counter folded into the seed.
Scene gen_scene(const SceneSpec& spec);

struct ReferenceSpec {
  int category_id = 0;
  int num_categories = 8;
  std::uint64_t seed = 0;
  int image_size = 64;
};

struct Reference {
  Tensor image;  // [3,S,S]
  Tensor mask;   // [1,S,S], the rendered object region
  double area_fraction = 0.0;
};

/// Salient rendering of a category object on a dark plain background.
Reference gen_reference(const ReferenceSpec& spec);

/// Unit-norm category anchor plus per-sentence Gaussian jitter of RMS norm
/// `jitter`, each row renormalized: [n_sentences, kTextDim].
Tensor gen_text_embedding(int category_id, int n_sentences, std::uint64_t seed, double jitter = 0.1);

/// Summed chroma direction of a category in RGB (zero channel mean, unit norm).
std::array<double, 3> chroma_direction(double hue);

// ---------------------------------------------------------------------------
// Dataset on disk.

struct DatasetSpec {
  std::uint64_t seed = 0;
  int categories = 8;
  int train_per_category = 40;
  int test_per_category = 16;
  int refs_per_category = 5;
  int sentences = 4;
  int image_size = 64;
  double strength = 0.85;
  bool decoys = true;
};

struct ManifestRow {
  std::string path;
  int category = 0;
  std::uint64_t seed = 0;
  double strength = 0.0;
  double area_fraction = 0.0;
};

/// Writes <root>/{train,test}/{images,masks,refs,text}/ and <root>/manifest.tsv.
/// Throws if `root` exists and is not empty.
std::vector<ManifestRow> gen_dataset(const std::string& root, const DatasetSpec& spec);

struct Split {
  std::vector<std::string> names;
  std::vector<int> categories;
  std::vector<Tensor> images;  // [3,S,S]
  std::vector<Tensor> masks;   // [1,S,S]
  std::vector<Tensor> text;    // [N, kTextDim]
  std::map<int, std::vector<Tensor>> refs;  // category -> reference images

  std::size_t size() const { return images.size(); }
};

Split load_split(const std::string& root, const std::string& split);

// 8-bit binary PGM. Multi-channel images are stored as channel planes stacked
// vertically (height C*H).
void write_pgm(const std::string& path, const Tensor& image);
Tensor read_pgm(const std::string& path, int channels);
std::uint8_t quantize(double v);

}  // namespace rfm::synth
