#pragma once

#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "icre/image.hpp"
#include "icre/rng.hpp"
#include "icre/tensor.hpp"

namespace icre {

enum class Modality { VIS = 0, IR = 1 };
enum class Split { TRAIN, QUERY, GALLERY };

const char* to_string(Modality m);
const char* to_string(Split s);
Modality modality_from_string(const std::string& s);

struct SampleRecord {
  std::string image_path;  // relative to Manifest::root unless absolute
  int identity = 0;        // contiguous 0..P_total-1 within the manifest
  Modality modality = Modality::VIS;
  int camera = 0;

  bool operator==(const SampleRecord&) const = default;
};

struct Manifest {
  std::string root;  // directory image paths are resolved against
  std::vector<SampleRecord> records;
  Split split = Split::TRAIN;
  std::vector<int> original_ids;      // contiguous id -> label as found in the CSV
  std::vector<std::string> warnings;  // e.g. TRAIN identity missing a modality

  int64_t num_vis() const;
  int64_t num_ir() const;
  int num_identities() const;
  std::string full_path(const SampleRecord& r) const;
};

/// CSV manifest: header `path,identity,modality,camera`, tokens VIS/IR,
/// UTF-8, LF endings. Identities are re-indexed to contiguous integers.
Manifest load_manifest(const std::string& csv_path, Split split = Split::TRAIN);
void save_manifest(const Manifest& m, const std::string& csv_path);
/// New manifest containing only records of one modality.
Manifest filter_modality(const Manifest& m, Modality mod, Split split);

// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int num_ids = 10;
  int imgs_per_id_per_modality = 20;
  int height = 64, width = 32;
  uint64_t seed = 7;
  /// Distinguishes image draws between datasets sharing identity signatures
  /// (0 = train set, 1 = held-out eval set of the same identities).
  uint64_t variation_tag = 0;
};

/// Renders per-identity geometric person signatures in a colored "visible"
/// style and a grayscale intensity-shifted "infrared" style, with nuisance
/// translation/scale/brightness/noise, and writes images + manifest.csv.
Manifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

// ---------------------------------------------------------------------------

struct SamplerConfig {
  int p = 6;  // identities per batch
  int k = 8;  // images per identity per batch, split K/2 per modality
  /// Alternate reading of the paper's "PK images from each modality":
  /// when true, K counts images per identity per modality (batch = 2*P*K).
  bool k_per_modality = false;
  uint64_t seed = 0;
};

struct AugmentConfig {
  double flip_prob = 0.5;
  double erase_prob = 0.5;
  double gray_prob = 0.05;
  double channel_aug_prob = 0.5;  // applied to VIS only
  int64_t target_h = 0, target_w = 0;  // 0 = keep input size

  void validate() const;
};

struct Batch {
  Tensor images;  // [N,3,H,W]
  std::vector<int> identities;
  std::vector<int> modalities;  // 0 = VIS, 1 = IR
};

/// Record indices for one PK batch: VIS block (P ids x K/2) then IR block,
/// identical identity order in both blocks.
std::vector<int64_t> sample_pk_indices(const Manifest& m, const SamplerConfig& cfg, Rng& rng);

class ImageCache {
 public:
  const img::Image8& get(const std::string& path);

 private:
  std::mutex mu_;
  std::unordered_map<std::string, img::Image8> cache_;
};

/// Resize -> flip -> channel replicate (VIS only) -> grayscale -> random
/// erasing, on normalized [3,H,W] values. Shape-preserving given a fixed
/// target size.
Tensor augment(const Tensor& image, Modality mod, const AugmentConfig& cfg, Rng& rng);

Batch sample_pk_batch(const Manifest& m, const SamplerConfig& cfg, Rng& rng,
                      const AugmentConfig& aug, bool augment_enabled, ImageCache& cache);

/// Batch of specific records without sampling (evaluation path).
Batch load_records(const Manifest& m, const std::vector<int64_t>& indices,
                   const AugmentConfig& aug, ImageCache& cache);

}  // namespace icre
