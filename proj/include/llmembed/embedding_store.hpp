#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace llmembed {

/// One backbone's embeddings for a dataset, laid out [row][depth][dim].
///
/// Depth index 0 is the block closest to the output (the "last" block);
/// encoder backbones carry a single depth. Values are stored in single
/// precision exactly as on disk; consumers widen to double when fusing.
struct EmbeddingMatrix {
  std::string source_name;
  std::uint64_t n_rows = 0;
  std::uint32_t n_depths = 0;
  std::uint32_t dim = 0;
  std::vector<float> data;

  std::size_t row_stride() const { return static_cast<std::size_t>(n_depths) * dim; }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(data).subspan(i * row_stride(), row_stride());
  }

  std::span<const float> vector(std::size_t row_index, std::size_t depth) const {
    return std::span<const float>(data).subspan(row_index * row_stride() + depth * dim, dim);
  }

  /// Throws Error(validation) on shape or finiteness violations.
  void validate() const;

  bool operator==(const EmbeddingMatrix&) const = default;
};

enum class Split { train, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

/// Row-aligned embeddings from several backbones plus labels.
struct DatasetBundle {
  std::vector<EmbeddingMatrix> sources;
  std::vector<std::uint32_t> labels;
  std::vector<std::string> class_names;
  Split split = Split::train;

  std::size_t n_rows() const { return labels.size(); }
  std::size_t n_classes() const { return class_names.size(); }

  /// nullptr when no source carries that name.
  const EmbeddingMatrix* find(std::string_view name) const;

  /// Checks alignment and label range; train bundles must also cover every class.
  void validate() const;
};

// Binary embedding file:
//   "LLME" | u32 version=1 | u16 name length | name bytes | u64 n_rows |
//   u32 n_depths | u32 dim | u8 dtype (0 = f32) | u32 crc32(header so far) |
//   payload f32[n_rows][n_depths][dim]
// All integers and floats little-endian.
inline constexpr char kEmbeddingMagic[4] = {'L', 'L', 'M', 'E'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;

void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path);
EmbeddingMatrix read_embeddings(const std::filesystem::path& path);

/// Scales every [row][depth] vector to unit L2 norm; all-zero vectors are left alone.
void l2_normalize(EmbeddingMatrix& matrix);

struct ManifestSource {
  std::string name;
  std::filesystem::path path;
  std::uint32_t depths = 0;
  std::uint32_t dim = 0;
};

/// JSON index tying per-backbone embedding files, a labels file and class
/// names into one bundle. Relative paths resolve against the manifest's
/// directory.
struct Manifest {
  std::vector<ManifestSource> sources;
  std::filesystem::path labels_path;
  std::vector<std::string> class_names;
  Split split = Split::train;
  bool l2_normalize = false;

  static Manifest read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
};

std::vector<std::uint32_t> read_labels(const std::filesystem::path& path);
void write_labels(std::span<const std::uint32_t> labels, const std::filesystem::path& path);

DatasetBundle load_bundle(const std::filesystem::path& manifest_path);

}  // namespace llmembed
