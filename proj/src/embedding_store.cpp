#include "llmembed/embedding_store.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "llmembed/error.hpp"

namespace llmembed {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::uint8_t kDtypeF32 = 0;

std::string describe(const EmbeddingMatrix& m) {
  std::ostringstream os;
  os << "'" << m.source_name << "' (" << m.n_rows << " x " << m.n_depths << " x " << m.dim << ")";
  return os.str();
}

std::vector<char> read_exact(std::ifstream& in, std::size_t n, const fs::path& path) {
  std::vector<char> buf(n);
  in.read(buf.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw Error(ErrorCode::corruption, "truncated header in " + path.string());
  }
  return buf;
}

}  // namespace

void EmbeddingMatrix::validate() const {
  if (n_depths < 1 || dim < 1) {
    throw Error(ErrorCode::validation, "embedding matrix " + describe(*this) + " needs n_depths >= 1 and dim >= 1");
  }
  const std::uint64_t expected = n_rows * n_depths * dim;
  if (data.size() != expected) {
    throw Error(ErrorCode::validation, "embedding matrix " + describe(*this) + " holds " +
                                           std::to_string(data.size()) + " values, expected " +
                                           std::to_string(expected));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      const std::size_t row = i / row_stride();
      throw Error(ErrorCode::validation,
                  "non-finite value in " + describe(*this) + " at row " + std::to_string(row));
    }
  }
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  throw Error(ErrorCode::validation, "split must be 'train' or 'test', got '" + std::string(text) + "'");
}

const EmbeddingMatrix* DatasetBundle::find(std::string_view name) const {
  for (const auto& s : sources) {
    if (s.source_name == name) return &s;
  }
  return nullptr;
}

void DatasetBundle::validate() const {
  if (class_names.empty()) {
    throw Error(ErrorCode::validation, "bundle has no class names");
  }
  for (const auto& s : sources) {
    if (s.n_rows != sources.front().n_rows) {
      throw Error(ErrorCode::alignment, "source '" + sources.front().source_name + "' has " +
                                            std::to_string(sources.front().n_rows) + " rows but source '" +
                                            s.source_name + "' has " + std::to_string(s.n_rows));
    }
  }
  if (!sources.empty() && sources.front().n_rows != labels.size()) {
    throw Error(ErrorCode::alignment, "sources have " + std::to_string(sources.front().n_rows) +
                                          " rows but labels have " + std::to_string(labels.size()));
  }
  std::vector<bool> seen(class_names.size(), false);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_names.size()) {
      throw Error(ErrorCode::range, "label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                                        " is out of range for " + std::to_string(class_names.size()) +
                                        " classes");
    }
    seen[labels[i]] = true;
  }
  if (split == Split::train) {
    for (std::size_t c = 0; c < seen.size(); ++c) {
      if (!seen[c]) {
        throw Error(ErrorCode::validation, "class " + std::to_string(c) + " ('" + class_names[c] +
                                               "') never appears in the train bundle");
      }
    }
  }
}

void write_embeddings(const EmbeddingMatrix& matrix, const fs::path& path) {
  matrix.validate();

  detail::ByteWriter header;
  header.put_bytes(std::string_view(kEmbeddingMagic, 4));
  header.put<std::uint32_t>(kEmbeddingVersion);
  header.put_string16(matrix.source_name);
  header.put<std::uint64_t>(matrix.n_rows);
  header.put<std::uint32_t>(matrix.n_depths);
  header.put<std::uint32_t>(matrix.dim);
  header.put<std::uint8_t>(kDtypeF32);
  header.seal();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(header.bytes().data(), static_cast<std::streamsize>(header.bytes().size()));

  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(matrix.data.data()),
              static_cast<std::streamsize>(matrix.data.size() * sizeof(float)));
  } else {
    detail::ByteWriter payload;
    payload.put_array(std::span<const float>(matrix.data));
    out.write(payload.bytes().data(), static_cast<std::streamsize>(payload.bytes().size()));
  }
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

EmbeddingMatrix read_embeddings(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);

  // magic(4) version(4) name_len(2), then name, then rows(8) depths(4) dim(4) dtype(1) crc(4)
  std::vector<char> header = read_exact(in, 10, path);
  if (std::memcmp(header.data(), kEmbeddingMagic, 4) != 0) {
    throw Error(ErrorCode::format, "bad magic in " + path.string() + ": expected 'LLME', found '" +
                                       std::string(header.data(), 4) + "'");
  }
  {
    detail::ByteReader prefix(header);
    prefix.get_bytes(4);
    const auto version = prefix.get<std::uint32_t>();
    if (version != kEmbeddingVersion) {
      throw Error(ErrorCode::format, "unsupported embedding file version " + std::to_string(version) + " in " +
                                         path.string());
    }
    const auto name_len = prefix.get<std::uint16_t>();
    const auto rest = read_exact(in, name_len + 21u, path);
    header.insert(header.end(), rest.begin(), rest.end());
  }

  detail::ByteReader reader(header);
  reader.get_bytes(8);
  EmbeddingMatrix m;
  m.source_name = reader.get_string16();
  m.n_rows = reader.get<std::uint64_t>();
  m.n_depths = reader.get<std::uint32_t>();
  m.dim = reader.get<std::uint32_t>();
  const auto dtype = reader.get<std::uint8_t>();
  reader.verify_seal("embedding file " + path.string());
  if (dtype != kDtypeF32) {
    throw Error(ErrorCode::format, "unsupported dtype code " + std::to_string(dtype) + " in " + path.string());
  }
  if (m.n_depths < 1 || m.dim < 1) {
    throw Error(ErrorCode::format, "zero depth or dim declared in " + path.string());
  }

  const std::uint64_t n_values = m.n_rows * m.n_depths * m.dim;
  const std::uint64_t payload_bytes = file_size - header.size();
  if (payload_bytes != n_values * sizeof(float)) {
    throw Error(ErrorCode::corruption, "payload of " + path.string() + " is " + std::to_string(payload_bytes) +
                                           " bytes, header implies " + std::to_string(n_values * sizeof(float)));
  }
  m.data.resize(n_values);
  in.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(payload_bytes));
  if (static_cast<std::uint64_t>(in.gcount()) != payload_bytes) {
    throw Error(ErrorCode::corruption, "short read on payload of " + path.string());
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (float& v : m.data) v = detail::byteswap_if_big(v);
  }
  m.validate();
  return m;
}

void l2_normalize(EmbeddingMatrix& matrix) {
  const std::size_t n_vectors = matrix.n_rows * matrix.n_depths;
  for (std::size_t v = 0; v < n_vectors; ++v) {
    float* p = matrix.data.data() + v * matrix.dim;
    double sq = 0.0;
    for (std::uint32_t k = 0; k < matrix.dim; ++k) sq += static_cast<double>(p[k]) * p[k];
    if (sq == 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::uint32_t k = 0; k < matrix.dim; ++k) p[k] = static_cast<float>(p[k] * inv);
  }
}

std::vector<std::uint32_t> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open labels file " + path.string());
  std::vector<std::uint32_t> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::size_t used = 0;
    long long value = 0;
    try {
      value = std::stoll(line, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || value < 0 || value > 0xFFFFFFFFLL) {
      throw Error(ErrorCode::format, "bad label '" + line + "' at " + path.string() + ":" + std::to_string(line_no));
    }
    labels.push_back(static_cast<std::uint32_t>(value));
  }
  return labels;
}

void write_labels(std::span<const std::uint32_t> labels, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  for (auto label : labels) out << label << '\n';
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

Manifest Manifest::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open manifest " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::format, "manifest " + path.string() + " is not valid JSON: " + e.what());
  }

  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path candidate(p);
    return candidate.is_absolute() ? candidate : base / candidate;
  };

  Manifest m;
  try {
    for (const auto& s : doc.at("sources")) {
      ManifestSource src;
      src.name = s.at("name").get<std::string>();
      src.path = resolve(s.at("path").get<std::string>());
      src.depths = s.at("depths").get<std::uint32_t>();
      src.dim = s.at("dim").get<std::uint32_t>();
      m.sources.push_back(std::move(src));
    }
    m.labels_path = resolve(doc.at("labels_path").get<std::string>());
    m.class_names = doc.at("class_names").get<std::vector<std::string>>();
    m.split = parse_split(doc.at("split").get<std::string>());
    m.l2_normalize = doc.value("l2_normalize", false);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::format, "manifest " + path.string() + ": " + e.what());
  }
  return m;
}

void Manifest::write(const fs::path& path) const {
  const fs::path base = path.parent_path();
  auto relative = [&](const fs::path& p) {
    if (p.is_relative()) return p.generic_string();
    auto rel = fs::relative(p, base.empty() ? fs::current_path() : base);
    return rel.empty() ? p.generic_string() : rel.generic_string();
  };

  json doc;
  doc["sources"] = json::array();
  for (const auto& s : sources) {
    doc["sources"].push_back({{"name", s.name}, {"path", relative(s.path)}, {"depths", s.depths}, {"dim", s.dim}});
  }
  doc["labels_path"] = relative(labels_path);
  doc["class_names"] = class_names;
  doc["split"] = std::string(to_string(split));
  doc["l2_normalize"] = l2_normalize;

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
}

DatasetBundle load_bundle(const fs::path& manifest_path) {
  const Manifest manifest = Manifest::read(manifest_path);

  DatasetBundle bundle;
  bundle.class_names = manifest.class_names;
  bundle.split = manifest.split;

  for (const auto& src : manifest.sources) {
    if (!fs::exists(src.path)) {
      throw Error(ErrorCode::io, "source '" + src.name + "' file not found: " + src.path.string());
    }
    EmbeddingMatrix m = read_embeddings(src.path);
    if (m.source_name != src.name) {
      throw Error(ErrorCode::mismatch, "manifest names source '" + src.name + "' but " + src.path.string() +
                                           " declares '" + m.source_name + "'");
    }
    if (m.n_depths != src.depths || m.dim != src.dim) {
      throw Error(ErrorCode::mismatch, "source '" + src.name + "' manifest declares " + std::to_string(src.depths) +
                                           " x " + std::to_string(src.dim) + " but file holds " +
                                           std::to_string(m.n_depths) + " x " + std::to_string(m.dim));
    }
    if (bundle.find(src.name) != nullptr) {
      throw Error(ErrorCode::validation, "source '" + src.name + "' listed twice in manifest");
    }
    if (manifest.l2_normalize) l2_normalize(m);
    bundle.sources.push_back(std::move(m));
  }

  if (!fs::exists(manifest.labels_path)) {
    throw Error(ErrorCode::io, "labels file not found: " + manifest.labels_path.string());
  }
  bundle.labels = read_labels(manifest.labels_path);
  bundle.validate();
  return bundle;
}

}  // namespace llmembed
