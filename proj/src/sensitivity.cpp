#include "dpllm/sensitivity.hpp"

#include <cmath>
#include <cstring>

#include "binio.hpp"
#include "json.hpp"

namespace dpllm {

using json = nlohmann::json;

std::string_view score_kind_name(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::SecondOrder:
      return "second_order";
    case ScoreKind::FirstOrder:
      return "first_order";
    case ScoreKind::Hawq:
      return "hawq";
  }
  return "?";
}

const std::map<LayerId, std::map<unsigned, double>>& SensitivityProfile::table(
    ScoreKind kind) const {
  switch (kind) {
    case ScoreKind::SecondOrder:
      return second_order;
    case ScoreKind::FirstOrder:
      return first_order;
    case ScoreKind::Hawq:
      return hawq;
  }
  return second_order;
}

double SensitivityProfile::score(ScoreKind kind, LayerId id, unsigned b) const {
  const auto& t = table(kind);
  const auto it = t.find(id);
  if (it == t.end()) throw ConfigError("profile has no scores for " + id.name());
  const auto jt = it->second.find(b);
  if (jt == it->second.end()) {
    throw ConfigError("profile has no " + std::to_string(b) + "-bit score for " + id.name());
  }
  return jt->second;
}

void GradientAccumulator::merge_into(Partial& dst, const Partial& src) {
  if (dst.sq.size() != src.sq.size()) {
    throw ShapeError("gradient samples cover different layer sets");
  }
  for (const auto& [id, m] : src.sq) {
    auto& d = dst.sq.at(id).values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += m.data()[i];
  }
  for (const auto& [id, m] : src.sum) {
    auto& d = dst.sum.at(id).values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += m.data()[i];
  }
}

void GradientAccumulator::add(const std::map<LayerId, Matrix>& grads) {
  Partial carry;
  for (const auto& [id, g] : grads) {
    Matrix sq(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) sq.data()[i] = g.data()[i] * g.data()[i];
    carry.sq.emplace(id, std::move(sq));
    carry.sum.emplace(id, g);
  }
  ++count_;
  for (std::size_t level = 0;; ++level) {
    if (level == levels_.size()) levels_.emplace_back();
    if (!levels_[level]) {
      levels_[level] = std::move(carry);
      return;
    }
    Partial merged = std::move(*levels_[level]);
    levels_[level].reset();
    merge_into(merged, carry);
    carry = std::move(merged);
  }
}

std::pair<std::map<LayerId, Matrix>, std::map<LayerId, Matrix>> GradientAccumulator::finish()
    const {
  if (count_ == 0) throw Error("empty calibration set");
  std::optional<Partial> total;
  for (const auto& l : levels_) {
    if (!l) continue;
    if (!total) {
      total = *l;
    } else {
      merge_into(*total, *l);
    }
  }
  return {std::move(total->sq), std::move(total->sum)};
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& w, const QuantizedLayer& layer) {
  if (a.rows() != w.rows() || a.cols() != w.cols() || w.rows() != layer.rows() ||
      w.cols() != layer.cols()) {
    throw ShapeError("score inputs have mismatched shapes");
  }
}

}  // namespace

double second_order_score(const Matrix& fisher, const Matrix& w, const QuantizedLayer& layer,
                          unsigned b) {
  check_same_shape(fisher, w, layer);
  const Matrix wb = dequantize(layer, b);
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w.data()[i] - wb.data()[i];
    s += fisher.data()[i] * d * d;
  }
  return 0.5 * s;
}

double first_order_score(const Matrix& grad_sum, const Matrix& w, const QuantizedLayer& layer,
                         unsigned b) {
  check_same_shape(grad_sum, w, layer);
  const Matrix wb = dequantize(layer, b);
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    s += grad_sum.data()[i] * (w.data()[i] - wb.data()[i]);
  }
  return std::abs(s);
}

double hawq_score(const Matrix& fisher, const Matrix& w, const QuantizedLayer& layer, unsigned b) {
  check_same_shape(fisher, w, layer);
  const Matrix wb = dequantize(layer, b);
  double trace = 0.0, norm2 = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w.data()[i] - wb.data()[i];
    trace += fisher.data()[i];
    norm2 += d * d;
  }
  return trace / static_cast<double>(w.size()) * norm2;
}

void compute_scores(SensitivityProfile& profile, const ModelWeights& weights,
                    const BitPlaneStore& store) {
  profile.second_order.clear();
  profile.first_order.clear();
  profile.hawq.clear();
  for (const auto& [id, layer] : store.layers()) {
    const Matrix& w = weights.linear(id);
    const Matrix& f = profile.fisher_diag.at(id);
    const Matrix& g = profile.grad_sum.at(id);
    for (unsigned b = store.b_min(); b <= store.n_bits(); ++b) {
      profile.second_order[id][b] = second_order_score(f, w, layer, b);
      profile.first_order[id][b] = first_order_score(g, w, layer, b);
      profile.hawq[id][b] = hawq_score(f, w, layer, b);
    }
  }
}

SensitivityProfile profile(const ModelWeights& weights, const BitPlaneStore& store,
                           std::span<const std::vector<Token>> calib, std::uint64_t corpus_hash) {
  if (calib.empty()) throw Error("empty calibration set");
  if (store.model_hash() != weights.checksum()) {
    throw ProvenanceError("store was built from a different model");
  }
  store.check_covers(weights.config);
  const Transformer model(weights);
  DenseProvider dense(weights);
  GradientAccumulator acc;
  for (const auto& sample : calib) {
    auto tape = model.forward_tape(sample, dense);
    auto grads = model.backward(*tape, dense);
    acc.add(grads.weight_grads);
  }
  SensitivityProfile p;
  std::tie(p.fisher_diag, p.grad_sum) = acc.finish();
  p.n_samples = acc.count();
  p.model_hash = weights.checksum();
  p.store_hash = store.content_hash();
  p.corpus_hash = corpus_hash;
  compute_scores(p, weights, store);
  return p;
}

// Profile file: one JSON header line, then little-endian f64 arrays per layer
// in header order: fisher, grad_sum, then for each bit in "bits" the
// second-order, first-order and hawq scores.
void save_profile(const SensitivityProfile& p, const std::filesystem::path& path) {
  json header;
  header["format"] = "dpllm-profile";
  header["version"] = 1;
  header["n_samples"] = p.n_samples;
  header["model_hash"] = hex64(p.model_hash);
  header["store_hash"] = hex64(p.store_hash);
  header["corpus_hash"] = hex64(p.corpus_hash);
  header["hawq_trace"] = "per_parameter_mean";
  std::vector<unsigned> bits;
  if (!p.second_order.empty()) {
    for (const auto& [b, v] : p.second_order.begin()->second) bits.push_back(b);
  }
  header["bits"] = bits;
  json layers = json::array();
  for (const auto& [id, f] : p.fisher_diag) {
    layers.push_back({{"name", id.name()}, {"rows", f.rows()}, {"cols", f.cols()}});
  }
  header["layers"] = layers;

  binio::Writer w;
  const std::string line = header.dump() + "\n";
  w.bytes(line.data(), line.size());
  for (const auto& [id, f] : p.fisher_diag) {
    const Matrix& g = p.grad_sum.at(id);
    w.bytes(f.data(), f.size() * sizeof(double));
    w.bytes(g.data(), g.size() * sizeof(double));
    for (unsigned b : bits) {
      w.put<double>(p.second_order.at(id).at(b));
      w.put<double>(p.first_order.at(id).at(b));
      w.put<double>(p.hawq.at(id).at(b));
    }
  }
  write_file_bytes(path, w.buffer());
}

SensitivityProfile load_profile(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t nl = 0;
  while (nl < bytes.size() && bytes[nl] != '\n') ++nl;
  if (nl == bytes.size()) throw IoError("profile file has no header line");
  json header;
  try {
    header = json::parse(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(nl));
  } catch (const json::exception& e) {
    throw IoError(std::string("profile header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != "dpllm-profile" || header.value("version", 0) != 1) {
    throw IoError("not a dpllm profile file (or unsupported version)");
  }
  SensitivityProfile p;
  try {
    p.n_samples = header.at("n_samples").get<std::size_t>();
    p.model_hash = parse_hex64(header.at("model_hash").get<std::string>());
    p.store_hash = parse_hex64(header.at("store_hash").get<std::string>());
    p.corpus_hash = parse_hex64(header.at("corpus_hash").get<std::string>());
  } catch (const json::exception& e) {
    throw IoError(std::string("profile header: ") + e.what());
  }
  const auto bits = header.at("bits").get<std::vector<unsigned>>();
  binio::Reader r(std::span<const std::uint8_t>(bytes).subspan(nl + 1), "profile file");
  for (const auto& entry : header.at("layers")) {
    const LayerId id = LayerId::parse(entry.at("name").get<std::string>());
    const auto rows = entry.at("rows").get<std::size_t>();
    const auto cols = entry.at("cols").get<std::size_t>();
    Matrix f(rows, cols), g(rows, cols);
    auto fb = r.bytes(f.size() * sizeof(double));
    std::memcpy(f.data(), fb.data(), fb.size());
    auto gb = r.bytes(g.size() * sizeof(double));
    std::memcpy(g.data(), gb.data(), gb.size());
    p.fisher_diag.emplace(id, std::move(f));
    p.grad_sum.emplace(id, std::move(g));
    for (unsigned b : bits) {
      p.second_order[id][b] = r.get<double>();
      p.first_order[id][b] = r.get<double>();
      p.hawq[id][b] = r.get<double>();
    }
  }
  if (!r.done()) throw IoError("profile file has trailing bytes");
  return p;
}

}  // namespace dpllm
