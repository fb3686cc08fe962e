#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dkua/numerics.hpp"

namespace dkua {

enum class Split { Train, Query, Gallery };

const char* to_string(Split split);
Split parse_split(const std::string& token);

struct DomainStyle {
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> bias{0.0, 0.0, 0.0};
  double brightness = 0.0;
  double noise = 0.0;
  int background = 0;
  /// Per-camera channel gains exp(camera_cast * z), z ~ N(0, 1) drawn once
  /// per camera, multiplying `gain`.
  double camera_cast = 0.0;
};

struct DomainSpec {
  std::string name = "domain";
  DomainStyle style;
  /// Identities in the training split; 0 marks an evaluation-only domain.
  int identities = 16;
  /// Identities reserved for query/gallery.
  int eval_identities = 16;
  int instances = 8;
  int cameras = 2;
  /// Maximum figure displacement in pixels.
  int jitter = 2;
  int channels = 3;
  int height = 32;
  int width = 16;

  void validate() const;
};

/// 8-bit planar image (C planes of H x W).
struct Image {
  std::uint16_t channels = 0;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::vector<std::uint8_t> pixels;

  /// Pixels scaled to [0, 1], in C,H,W order.
  Eigen::RowVectorXd to_row() const;
  bool operator==(const Image&) const = default;
};

struct IndexRecord {
  std::string path;
  int identity = 0;
  int camera = 0;
  int domain = 0;
  Split split = Split::Train;

  bool operator==(const IndexRecord&) const = default;
};

struct DatasetIndex {
  std::vector<IndexRecord> records;

  bool operator==(const DatasetIndex&) const = default;
  /// Domain ids in ascending order.
  std::vector<int> domains() const;
  bool has_train(int domain) const;
  /// Throws ValidationError if an identity id occurs in two domains.
  void check_disjoint_identities() const;
};

/// Index plus in-memory image payloads, aligned with `index.records`.
struct Dataset {
  DatasetIndex index;
  std::vector<Image> images;

  /// Sub-dataset with the records of one domain, optionally one split.
  Dataset select(int domain) const;
  Dataset select(int domain, Split split) const;
  void append(const Dataset& other);
};

/// Pixel-wise clamp(gain * x + bias + brightness, 0, 1) per channel, then
/// additive Gaussian noise (clamped to [0, 1]).
Tensor apply_style(const Tensor& image, const DomainStyle& style, int channels, std::uint64_t noise_seed);

/// Renders one domain. Identity ids start at `first_identity`; images are
/// quantized to 8 bits. Identical (spec, seed) give byte-identical output.
Dataset generate_domain(const DomainSpec& spec, std::uint64_t seed, int domain, int first_identity);

/// The default desk-scale sequence: three seen domains and one unseen.
std::vector<DomainSpec> default_domain_specs();

/// Generates every spec with per-domain seeds derived from `seed`.
Dataset generate_sequence(const std::vector<DomainSpec>& specs, std::uint64_t seed);

// Index and image files.
void write_index(const std::filesystem::path& path, const DatasetIndex& index);
DatasetIndex load_index(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& image);
Image read_image(const std::filesystem::path& path);

/// Writes <dir>/index.tsv and every image under <dir>/<record.path>.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

struct Batch {
  Tensor images;            // B x (C*H*W)
  std::vector<int> labels;  // domain-local class indices
  std::vector<int> identities;
  int domain = 0;
};

/// Seeded P x K identity sampler over the train split of a single domain.
class PkSampler {
 public:
  PkSampler(const Dataset& domain_train, int p, int k, std::uint64_t seed);

  /// Record indices for every batch of `epoch`; deterministic in (seed, epoch).
  std::vector<std::vector<std::size_t>> epoch(int epoch) const;
  Batch make_batch(const std::vector<std::size_t>& records) const;

  int classes() const { return static_cast<int>(identity_order_.size()); }
  int label_of(int identity) const { return labels_.at(identity); }

 private:
  const Dataset* data_;
  int p_;
  int k_;
  std::uint64_t seed_;
  std::vector<int> identity_order_;
  std::map<int, int> labels_;
  std::map<int, std::vector<std::size_t>> members_;
};

}  // namespace dkua
