#include "llmembed/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "binary_io.hpp"
#include "llmembed/error.hpp"

namespace llmembed {
namespace fs = std::filesystem;

namespace {

void put_matrix(detail::ByteWriter& w, const Matrix& m) {
  w.put_array(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
}

void put_vector(detail::ByteWriter& w, const Vector& v) {
  w.put_array(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

void get_matrix(detail::ByteReader& r, Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  m.resize(rows, cols);
  r.get_array(std::span<double>(m.data(), static_cast<std::size_t>(m.size())));
}

void get_vector(detail::ByteReader& r, Vector& v, Eigen::Index n) {
  v.resize(n);
  r.get_array(std::span<double>(v.data(), static_cast<std::size_t>(v.size())));
}

}  // namespace

Checkpoint make_checkpoint(const FusionStrategy& strategy, const DatasetBundle& train_set,
                           ClassifierParams classifier, ProjectionParams projections) {
  Checkpoint ck;
  ck.strategy = strategy;
  for (auto name : strategy.required_sources()) {
    const EmbeddingMatrix* m = train_set.find(name);
    if (m == nullptr) {
      throw Error(ErrorCode::missing_source, "train bundle lacks source '" + std::string(name) + "'");
    }
    ck.sources.push_back({m->source_name, m->n_depths, m->dim});
  }
  ck.class_names = train_set.class_names;
  ck.classifier = std::move(classifier);
  ck.projections = std::move(projections);
  return ck;
}

void Checkpoint::check_compatible(const DatasetBundle& bundle) const {
  for (const auto& src : sources) {
    const EmbeddingMatrix* m = bundle.find(src.name);
    if (m == nullptr) {
      throw Error(ErrorCode::missing_source, "checkpoint needs source '" + src.name + "' which the bundle lacks");
    }
    if (m->n_depths != src.depths || m->dim != src.dim) {
      throw Error(ErrorCode::mismatch, "source '" + src.name + "' is " + std::to_string(m->n_depths) + " x " +
                                           std::to_string(m->dim) + " but the checkpoint was trained on " +
                                           std::to_string(src.depths) + " x " + std::to_string(src.dim));
    }
  }
  if (bundle.n_classes() != class_names.size()) {
    throw Error(ErrorCode::mismatch, "bundle has " + std::to_string(bundle.n_classes()) +
                                         " classes, checkpoint has " + std::to_string(class_names.size()));
  }
}

void write_checkpoint(const Checkpoint& ck, const fs::path& path) {
  ck.strategy.validate();
  if (ck.sources.size() > 255) throw Error(ErrorCode::validation, "too many sources for a checkpoint");
  if (ck.classifier.n_classes() != ck.class_names.size()) {
    throw Error(ErrorCode::validation, "classifier width does not match the class names");
  }

  detail::ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 4));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.strategy.index));
  w.put<double>(ck.strategy.sigma);
  w.put<std::uint32_t>(ck.strategy.projection_dim);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(ck.sources.size()));
  for (const auto& s : ck.sources) {
    w.put_string16(s.name);
    w.put<std::uint32_t>(s.depths);
    w.put<std::uint32_t>(s.dim);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.class_names.size()));
  for (const auto& name : ck.class_names) w.put_string16(name);
  w.put<std::uint64_t>(ck.classifier.input_dim());
  w.put<std::uint32_t>(ck.classifier.hidden_width);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.projections.layers.size()));
  for (const auto& layer : ck.projections.layers) w.put_string16(layer.source);
  w.seal();

  detail::ByteWriter payload;
  if (ck.classifier.has_hidden()) {
    put_matrix(payload, ck.classifier.hidden_weight);
    put_vector(payload, ck.classifier.hidden_bias);
  }
  put_matrix(payload, ck.classifier.weight);
  put_vector(payload, ck.classifier.bias);
  for (const auto& layer : ck.projections.layers) {
    put_matrix(payload, layer.weight);
    put_vector(payload, layer.bias);
  }
  payload.seal();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  out.write(payload.bytes().data(), static_cast<std::streamsize>(payload.bytes().size()));
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open checkpoint " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw Error(ErrorCode::format, "bad magic in " + path.string() + ": expected 'LLMC'");
  }

  detail::ByteReader r(bytes);
  r.get_bytes(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::format, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.strategy.index = static_cast<int>(r.get<std::uint32_t>());
  ck.strategy.sigma = r.get<double>();
  ck.strategy.projection_dim = r.get<std::uint32_t>();
  const auto n_sources = r.get<std::uint8_t>();
  for (std::uint8_t i = 0; i < n_sources; ++i) {
    CheckpointSource s;
    s.name = r.get_string16();
    s.depths = r.get<std::uint32_t>();
    s.dim = r.get<std::uint32_t>();
    ck.sources.push_back(std::move(s));
  }
  const auto n_classes = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_classes; ++i) ck.class_names.push_back(r.get_string16());
  const auto input_dim = r.get<std::uint64_t>();
  const auto hidden_width = r.get<std::uint32_t>();
  const auto n_layers = r.get<std::uint32_t>();
  std::vector<std::string> layer_sources;
  for (std::uint32_t i = 0; i < n_layers; ++i) layer_sources.push_back(r.get_string16());
  r.verify_seal("checkpoint " + path.string());
  ck.strategy.validate();

  SourceLayout layout;
  for (const auto& s : ck.sources) {
    const SourceShape shape{s.depths, s.dim};
    if (s.name == kLlama2) layout.llama2 = shape;
    if (s.name == kBert) layout.bert = shape;
    if (s.name == kRoberta) layout.roberta = shape;
  }
  if (fused_dim(ck.strategy, layout) != input_dim) {
    throw Error(ErrorCode::corruption, "checkpoint input width " + std::to_string(input_dim) +
                                           " disagrees with its strategy and source shapes");
  }

  const auto d = static_cast<Eigen::Index>(input_dim);
  const auto c = static_cast<Eigen::Index>(n_classes);
  const std::size_t payload_start = r.position();
  ck.classifier.hidden_width = hidden_width;
  if (hidden_width > 0) {
    get_matrix(r, ck.classifier.hidden_weight, hidden_width, d);
    get_vector(r, ck.classifier.hidden_bias, hidden_width);
    get_matrix(r, ck.classifier.weight, c, hidden_width);
  } else {
    get_matrix(r, ck.classifier.weight, c, d);
  }
  get_vector(r, ck.classifier.bias, c);
  for (const auto& name : layer_sources) {
    const auto shape = layout.get(name);
    if (!shape) throw Error(ErrorCode::corruption, "projection for unknown source '" + name + "'");
    Projection layer;
    layer.source = name;
    get_matrix(r, layer.weight, shape->dim, ck.strategy.projection_dim);
    get_vector(r, layer.bias, ck.strategy.projection_dim);
    ck.projections.layers.push_back(std::move(layer));
  }
  const std::uint32_t expected =
      detail::ByteWriter::crc32_of(std::span<const char>(bytes).subspan(payload_start, r.position() - payload_start));
  if (r.get<std::uint32_t>() != expected) {
    throw Error(ErrorCode::corruption, "checkpoint " + path.string() + " payload checksum mismatch");
  }
  if (r.remaining() != 0) {
    throw Error(ErrorCode::corruption, "trailing bytes after checkpoint payload in " + path.string());
  }
  return ck;
}

}  // namespace llmembed
