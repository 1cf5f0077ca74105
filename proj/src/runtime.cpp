#include "dpllm/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace dpllm {

using json = nlohmann::json;

namespace {

constexpr int kPlanVersion = 1;

json threshold_to_json(double t) {
  if (std::isinf(t)) return t > 0 ? "inf" : "-inf";
  return t;
}

double threshold_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return kInf;
    if (s == "-inf") return -kInf;
    throw ConfigError("plan: bad threshold '" + s + "'");
  }
  return j.get<double>();
}

json estimator_to_json(const ErrorEstimator& e) {
  json j{{"kind", estimator_kind_name(e.kind)},
         {"source", input_source_name(e.source)},
         {"l", e.l},
         {"h", e.h},
         {"calibrated", e.calibrated},
         {"calib_mre", e.calib_mre}};
  if (e.kind == EstimatorKind::Linear) {
    j["slope"] = e.slope;
    j["intercept"] = e.intercept;
    j["r2"] = e.r2;
  }
  if (e.kind == EstimatorKind::Projection) {
    j["k"] = e.g.rows();
    j["cols"] = e.g.cols();
    j["seed"] = hex64(e.seed);
    j["g"] = e.g.values();
  }
  return j;
}

ErrorEstimator estimator_from_json(const json& j) {
  ErrorEstimator e;
  e.kind = parse_estimator_kind(j.at("kind").get<std::string>());
  e.source = parse_input_source(j.at("source").get<std::string>());
  e.l = j.at("l").get<unsigned>();
  e.h = j.at("h").get<unsigned>();
  e.calibrated = j.value("calibrated", false);
  e.calib_mre = j.value("calib_mre", 0.0);
  if (e.kind == EstimatorKind::Linear) {
    e.slope = j.at("slope").get<double>();
    e.intercept = j.at("intercept").get<double>();
    e.r2 = j.at("r2").get<double>();
  }
  if (e.kind == EstimatorKind::Projection) {
    const auto k = j.at("k").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    const auto g = j.at("g").get<std::vector<double>>();
    if (g.size() != k * cols) throw ConfigError("plan: projection matrix size mismatch");
    e.g = Matrix(k, cols);
    std::copy(g.begin(), g.end(), e.g.data());
    e.seed = parse_hex64(j.at("seed").get<std::string>());
  }
  return e;
}

double effective_bits(std::span<const std::uint8_t> bits, std::span<const std::uint64_t> m) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    num += static_cast<double>(bits[i]) * static_cast<double>(m[i]);
    den += static_cast<double>(m[i]);
  }
  return den == 0.0 ? 0.0 : num / den;
}

void check_decode_length(const ModelWeights& weights, std::size_t prompt, std::size_t n_new) {
  const std::size_t steps = n_new == 0 ? prompt : prompt + n_new - 1;
  if (steps > weights.config.seq_cap) {
    throw ConfigError("decode: prompt plus new tokens exceed the context length");
  }
}

Token argmax(std::span<const double> logits) {
  return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

}  // namespace

void PrecisionPlan::validate() const {
  if (layers.empty()) throw ConfigError("plan has no layers");
  if (b_min < kMinSupportedBits || n_bits > kMaxSupportedBits || b_min > n_bits) {
    throw ConfigError("plan: bad bit range");
  }
  for (const auto& [id, L] : layers) {
    const std::string name = id.name();
    if (!params.contains(id)) throw ConfigError("plan: no parameter count for " + name);
    // A static layer's sentinel pair may reach above B_max; only its served bit matters.
    const unsigned top = L.is_static() ? L.static_bit() : L.h;
    if (L.l < b_min || L.h > n_bits || L.l > L.h || top > L.b_max || L.b_max > n_bits) {
      throw ConfigError("plan: bit pair out of range for " + name);
    }
    if (L.p < L.l - 1e-12 || L.p > L.h + 1e-12) throw ConfigError("plan: p outside [l, h] for " + name);
    if (std::isnan(L.threshold)) throw ConfigError("plan: NaN threshold for " + name);
    if (L.is_static()) {
      if (L.estimator) throw ConfigError("plan: static layer carries an estimator: " + name);
    } else {
      if (L.l == L.h) throw ConfigError("plan: dynamic layer needs l < h: " + name);
      if (!L.estimator) throw ConfigError("plan: dynamic layer without estimator: " + name);
      if (L.estimator->l != L.l || L.estimator->h != L.h) {
        throw ConfigError("plan: estimator pair differs from layer pair: " + name);
      }
    }
  }
  if (params.size() != layers.size()) throw ConfigError("plan: parameter map covers other layers");
}

double PrecisionPlan::expected_bits() const {
  double num = 0.0, den = 0.0;
  for (const auto& [id, L] : layers) {
    const double m = static_cast<double>(params.at(id));
    num += L.p * m;
    den += m;
  }
  return den == 0.0 ? 0.0 : num / den;
}

std::uint64_t PrecisionPlan::content_hash() const {
  Fnv1a h;
  h.update(plan_to_json(*this));
  return h.digest();
}

void PrecisionPlan::check_against(const ModelWeights& weights, const BitPlaneStore& store) const {
  if (store.content_hash() != provenance.store_hash) {
    throw ProvenanceError("plan was built for store " + hex64(provenance.store_hash) +
                          ", loaded store is " + hex64(store.content_hash()));
  }
  if (weights.checksum() != provenance.model_hash || store.model_hash() != provenance.model_hash) {
    throw ProvenanceError("plan was built for model " + hex64(provenance.model_hash));
  }
  if (store.n_bits() != n_bits || store.b_min() != b_min) {
    throw ProvenanceError("plan bit range differs from the store");
  }
  for (const auto& [id, l] : store.layers()) {
    if (!layers.contains(id)) throw ProvenanceError("plan lacks layer " + id.name());
  }
  if (layers.size() != store.layers().size()) throw ProvenanceError("plan has extra layers");
}

PrecisionPlan static_plan(const std::map<LayerId, unsigned>& bits, const BitPlaneStore& store,
                          std::string method, double target_bits) {
  PrecisionPlan plan;
  plan.method = std::move(method);
  plan.target_bits = target_bits;
  plan.n_bits = store.n_bits();
  plan.b_min = store.b_min();
  plan.provenance.model_hash = store.model_hash();
  plan.provenance.store_hash = store.content_hash();
  for (const auto& [id, q] : store.layers()) {
    const auto it = bits.find(id);
    if (it == bits.end()) throw ConfigError("static plan: no bitwidth for " + id.name());
    const unsigned b = it->second;
    q.check_bits(b);
    PlanLayer L;
    L.b_max = b;
    L.p = b;
    if (b < store.n_bits()) {
      L.l = b;
      L.h = b + 1;
      L.threshold = kInf;
      L.r = 1.0;
    } else if (b > store.b_min()) {
      L.l = b - 1;
      L.h = b;
      L.threshold = -kInf;
      L.r = 0.0;
    } else {
      L.l = L.h = b;
    }
    plan.layers[id] = L;
    plan.params[id] = static_cast<std::uint64_t>(q.rows()) * q.cols();
  }
  return plan;
}

PrecisionPlan build_dynamic_plan(const ModelWeights& weights, const BitPlaneStore& store,
                                 const std::map<LayerId, unsigned>& max_bits,
                                 const std::map<LayerId, double>& p,
                                 std::span<const std::vector<Token>> calib,
                                 const PlanBuildOptions& options, double target_bits,
                                 EstimatorCache* cache) {
  PrecisionPlan plan;
  plan.method = "dp";
  plan.target_bits = target_bits;
  plan.n_bits = store.n_bits();
  plan.b_min = store.b_min();
  plan.estimator_mode = options.estimator.mode == EstimatorMode::Exact ? "exact" : "hybrid";
  plan.async = options.estimator.async && options.estimator.mode != EstimatorMode::Exact;
  plan.async_mode = options.async_mode;
  plan.prime_from_prefill = options.prime_from_prefill;
  plan.provenance.model_hash = store.model_hash();
  plan.provenance.store_hash = store.content_hash();

  std::map<LayerId, InterpCoeffs> pairs, missing;
  for (const auto& [id, q] : store.layers()) {
    const unsigned upper = max_bits.at(id);
    const double pi = p.at(id);
    PlanLayer L;
    L.b_max = upper;
    L.p = pi;
    plan.params[id] = static_cast<std::uint64_t>(q.rows()) * q.cols();
    if (pi == std::floor(pi)) {
      const auto b = static_cast<unsigned>(pi);
      q.check_bits(b);
      if (b < upper) {
        L.l = b;
        L.h = b + 1;
        L.threshold = kInf;
        L.r = 1.0;
      } else if (b > store.b_min()) {
        L.l = b - 1;
        L.h = b;
        L.threshold = -kInf;
        L.r = 0.0;
      } else {
        L.l = L.h = b;
      }
    } else {
      const InterpCoeffs c = interp_coeffs(pi, store.b_min(), upper);
      L.l = c.l;
      L.h = c.h;
      L.r = c.r;
      pairs[id] = c;
      if (!cache || !cache->entries.contains({id, c.l, c.h})) missing[id] = c;
    }
    plan.layers[id] = L;
  }

  std::map<std::tuple<LayerId, unsigned, unsigned>, EstimatorCache::Entry> local;
  auto& entries = cache ? cache->entries : local;
  if (!missing.empty()) {
    CaptureOptions copt;
    copt.async = plan.async;
    copt.mode = options.async_mode;
    copt.max_inputs = options.max_inputs;
    auto caps = collect_error_samples(weights, store, max_bits, missing, calib, copt);
    for (auto& [id, cap] : caps) {
      EstimatorCache::Entry e;
      e.build = build_estimator(id, cap, store.layer(id), options.estimator);
      e.sorted_errors = std::move(cap.sorted_errors);
      entries[{id, cap.l, cap.h}] = std::move(e);
    }
  }
  if (cache) cache->hits += pairs.size() - missing.size();

  for (const auto& [id, c] : pairs) {
    const auto& e = entries.at({id, c.l, c.h});
    PlanLayer& L = plan.layers.at(id);
    const ThresholdEntry t = translate_threshold(e.sorted_errors, L.p, c.l);
    L.threshold = t.threshold;
    L.r = t.r;
    if (!L.is_static()) L.estimator = e.build.estimator;
    for (const auto& w : e.build.warnings) plan.warnings.push_back(w);
  }
  plan.validate();
  return plan;
}

std::string plan_to_json(const PrecisionPlan& plan) {
  json layers = json::array();
  for (const auto& [id, L] : plan.layers) {
    json j{{"name", id.name()},       {"params", plan.params.at(id)}, {"b_max", L.b_max},
           {"p", L.p},                {"l", L.l},                     {"h", L.h},
           {"r", L.r},                {"threshold", threshold_to_json(L.threshold)}};
    j["estimator"] = L.estimator ? estimator_to_json(*L.estimator) : json(nullptr);
    layers.push_back(std::move(j));
  }
  json fit = json::object();
  for (const auto& [k, v] : plan.fit) fit[k] = v;
  const json j{
      {"format", "dpllm-plan"},
      {"version", kPlanVersion},
      {"method", plan.method},
      {"target_bits", plan.target_bits},
      {"budget_bits", plan.budget_bits},
      {"n_bits", plan.n_bits},
      {"b_min", plan.b_min},
      {"estimator_mode", plan.estimator_mode},
      {"async", plan.async},
      {"async_mode", async_mode_name(plan.async_mode)},
      {"prime_from_prefill", plan.prime_from_prefill},
      {"provenance",
       {{"model_hash", hex64(plan.provenance.model_hash)},
        {"store_hash", hex64(plan.provenance.store_hash)},
        {"profile_hash", hex64(plan.provenance.profile_hash)},
        {"corpus_hash", hex64(plan.provenance.corpus_hash)}}},
      {"fit", fit},
      {"warnings", plan.warnings},
      {"layers", layers},
  };
  return j.dump(1);
}

PrecisionPlan plan_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("plan: ") + e.what());
  }
  try {
    if (j.value("format", "") != "dpllm-plan") throw ConfigError("not a plan file");
    if (j.value("version", 0) != kPlanVersion) throw ConfigError("unsupported plan version");
    PrecisionPlan plan;
    plan.method = j.at("method").get<std::string>();
    plan.target_bits = j.at("target_bits").get<double>();
    plan.budget_bits = j.value("budget_bits", 0.0);
    plan.n_bits = j.at("n_bits").get<unsigned>();
    plan.b_min = j.at("b_min").get<unsigned>();
    plan.estimator_mode = j.value("estimator_mode", "exact");
    plan.async = j.value("async", false);
    plan.async_mode = parse_async_mode(j.value("async_mode", "previous_token"));
    plan.prime_from_prefill = j.value("prime_from_prefill", true);
    const auto& pv = j.at("provenance");
    plan.provenance.model_hash = parse_hex64(pv.at("model_hash").get<std::string>());
    plan.provenance.store_hash = parse_hex64(pv.at("store_hash").get<std::string>());
    plan.provenance.profile_hash = parse_hex64(pv.at("profile_hash").get<std::string>());
    plan.provenance.corpus_hash = parse_hex64(pv.at("corpus_hash").get<std::string>());
    for (const auto& [k, v] : j.at("fit").items()) plan.fit[k] = v.get<double>();
    plan.warnings = j.value("warnings", std::vector<std::string>{});
    for (const auto& lj : j.at("layers")) {
      const LayerId id = LayerId::parse(lj.at("name").get<std::string>());
      PlanLayer L;
      L.b_max = lj.at("b_max").get<unsigned>();
      L.p = lj.at("p").get<double>();
      L.l = lj.at("l").get<unsigned>();
      L.h = lj.at("h").get<unsigned>();
      L.r = lj.at("r").get<double>();
      L.threshold = threshold_from_json(lj.at("threshold"));
      if (!lj.at("estimator").is_null()) L.estimator = estimator_from_json(lj.at("estimator"));
      plan.layers[id] = std::move(L);
      plan.params[id] = lj.at("params").get<std::uint64_t>();
    }
    plan.validate();
    return plan;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("plan: ") + e.what());
  }
}

void save_plan(const PrecisionPlan& plan, const std::filesystem::path& path) {
  const std::string s = plan_to_json(plan);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

PrecisionPlan load_plan(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return plan_from_json(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

unsigned select_precision(const PlanLayer& layer, double estimate) {
  if (layer.threshold == kInf) return layer.l;
  if (layer.threshold == -kInf) return layer.h;
  return estimate > layer.threshold ? layer.h : layer.l;
}

double DecodeTrace::mean_effective_bits() const {
  if (steps.empty()) return 0.0;
  double s = 0.0;
  for (const auto& st : steps) s += st.effective_bits;
  return s / static_cast<double>(steps.size());
}

std::size_t DecodeTrace::total_estimator_ops() const {
  std::size_t s = 0;
  for (const auto& st : steps) s += st.estimator_ops;
  return s;
}

DynamicProvider::DynamicProvider(const PrecisionPlan& plan, const ModelWeights& weights,
                                 const BitPlaneStore& store, const RuntimeOptions& options)
    : plan_(&plan), store_(&store), options_(options), tracker_(weights, plan.async_mode),
      deltas_(store) {
  for (const auto& [id, L] : plan.layers) {
    index_[id] = trace_.layers.size();
    trace_.layers.push_back(id);
    m_.push_back(plan.params.at(id));
    if (options_.audit) trace_.audit[id];
  }
}

StepRecord& DynamicProvider::step_for(std::size_t pos) {
  if (open_ && trace_.steps.back().position == pos) return trace_.steps.back();
  close_step();
  StepRecord r;
  r.position = pos;
  r.bits.assign(trace_.layers.size(), 0);
  r.estimates.assign(trace_.layers.size(), 0.0);
  trace_.steps.push_back(std::move(r));
  open_ = true;
  return trace_.steps.back();
}

void DynamicProvider::close_step() {
  if (!open_) return;
  auto& st = trace_.steps.back();
  st.effective_bits = effective_bits(st.bits, m_);
  open_ = false;
}

DecodeTrace DynamicProvider::take_trace() {
  close_step();
  DecodeTrace out = std::move(trace_);
  trace_ = DecodeTrace{};
  trace_.layers = out.layers;
  if (options_.audit) {
    for (const auto& id : out.layers) trace_.audit[id];
  }
  return out;
}

void DynamicProvider::observe_residual(std::uint32_t block, NormSite site, std::size_t pos,
                                       std::span<const double> residual) {
  tracker_.observe(block, site, pos, residual);
}

void DynamicProvider::linear(LayerId id, std::size_t pos, std::span<const double> x,
                             std::span<double> y) {
  const PlanLayer& L = plan_->layers.at(id);
  const QuantizedLayer& q = store_->layer(id);
  if (prefill_) {
    gemv(q, L.b_max, x, y);
    return;
  }
  StepRecord& st = step_for(pos);
  const std::size_t i = index_.at(id);
  double est = 0.0;
  bool fallback = false;
  unsigned bit;
  if (L.is_static()) {
    bit = L.static_bit();
  } else {
    const ErrorEstimator& e = *L.estimator;
    std::optional<std::vector<double>> src;
    if (e.source == InputSource::PreviousResidual) {
      src = tracker_.source(id, pos);
      fallback = !src;
    }
    const std::span<const double> in = src ? std::span<const double>(*src) : x;
    const Matrix* delta = e.kind == EstimatorKind::Exact ? &deltas_.get(id, L.l, L.h) : nullptr;
    est = e.estimate(in, delta);
    bit = select_precision(L, est);
    st.estimator_ops += e.op_count(q.rows(), q.cols());
  }
  st.bits[i] = static_cast<std::uint8_t>(bit);
  st.estimates[i] = est;
  gemv(q, bit, x, y);

  if (!options_.audit) return;
  LayerAudit& a = trace_.audit.at(id);
  const double err = L.l == L.h ? 0.0 : exact_error(deltas_.get(id, L.l, L.h), x);
  ++a.steps;
  if (bit == L.h && L.l != L.h) ++a.high;
  a.exact_sum += err;
  if (bit == L.l) a.incurred += err;
  if (fallback) ++a.fallbacks;
  if (options_.keep_step_errors) a.errors.push_back(err);
  if (bit != store_->n_bits()) {
    std::vector<double> yn = gemv(q, store_->n_bits(), x);
    for (std::size_t r = 0; r < yn.size(); ++r) yn[r] -= y[r];
    a.reference_error += l2_norm(yn);
  }
}

DecodeResult decode_with_provider(const ModelWeights& weights, WeightProvider& provider,
                                  std::span<const Token> prompt, std::size_t n_new) {
  if (prompt.empty()) throw ConfigError("decode: empty prompt");
  check_decode_length(weights, prompt.size(), n_new);
  const Transformer model(weights);
  auto session = model.start_session(provider);
  DecodeResult out;
  std::span<const double> logits;
  for (const Token t : prompt) logits = session.step(t);
  for (std::size_t i = 0; i < n_new; ++i) {
    if (i > 0) logits = session.step(out.tokens.back());
    out.logits.emplace_back(logits.begin(), logits.end());
    out.tokens.push_back(argmax(logits));
  }
  return out;
}

DecodeResult decode(const PrecisionPlan& plan, const ModelWeights& weights,
                    const BitPlaneStore& store, std::span<const Token> prompt, std::size_t n_new,
                    const RuntimeOptions& options) {
  if (prompt.empty()) throw ConfigError("decode: empty prompt");
  check_decode_length(weights, prompt.size(), n_new);
  plan.check_against(weights, store);
  DynamicProvider provider(plan, weights, store, options);
  const Transformer model(weights);
  auto session = model.start_session(provider);
  DecodeResult out;

  provider.set_prefill(true);
  const std::size_t prefill = n_new == 0 ? prompt.size() : prompt.size() - 1;
  for (std::size_t t = 0; t < prefill; ++t) session.step(prompt[t]);
  provider.set_prefill(false);
  if (!plan.prime_from_prefill) provider.reset_residuals();

  Token next = prompt.back();
  for (std::size_t i = 0; i < n_new; ++i) {
    const auto logits = session.step(next);
    out.logits.emplace_back(logits.begin(), logits.end());
    next = argmax(logits);
    out.tokens.push_back(next);
  }
  out.trace = provider.take_trace();
  return out;
}

namespace {

void teacher_forced(const ModelWeights& weights, WeightProvider& provider,
                    std::span<const Token> q, std::vector<double>& losses) {
  const Transformer model(weights);
  auto session = model.start_session(provider);
  for (std::size_t t = 0; t + 1 < q.size(); ++t) {
    losses.push_back(cross_entropy(session.step(q[t]), q[t + 1]));
  }
}

void finish_eval(EvalResult& r) {
  if (r.token_losses.empty()) throw ConfigError("eval: no predictions (queries need 2+ tokens)");
  r.predictions = r.token_losses.size();
  r.loss = mean_loss_from_token_losses(r.token_losses);
  r.perplexity = std::exp(r.loss);
}

}  // namespace

EvalResult eval_dynamic(const PrecisionPlan& plan, const ModelWeights& weights,
                        const BitPlaneStore& store, std::span<const std::vector<Token>> queries,
                        const RuntimeOptions& options) {
  plan.check_against(weights, store);
  EvalResult r;
  for (const auto& q : queries) {
    DynamicProvider provider(plan, weights, store, options);
    teacher_forced(weights, provider, q, r.token_losses);
    r.traces.push_back(provider.take_trace());
  }
  finish_eval(r);
  return r;
}

EvalResult eval_with_provider(const ModelWeights& weights, WeightProvider& provider,
                              std::span<const std::vector<Token>> queries) {
  EvalResult r;
  for (const auto& q : queries) teacher_forced(weights, provider, q, r.token_losses);
  finish_eval(r);
  return r;
}

QosReport qos_stats(std::span<const double> per_query_bits, double target) {
  if (per_query_bits.empty()) throw ConfigError("qos: empty query set");
  std::vector<double> v(per_query_bits.begin(), per_query_bits.end());
  std::sort(v.begin(), v.end());
  const auto n = static_cast<double>(v.size());
  auto rank = [&](double q) {
    const auto k = static_cast<std::size_t>(std::ceil(q * n - 1e-9));
    return v[std::clamp<std::size_t>(k, 1, v.size()) - 1];
  };
  QosReport r;
  r.target = target;
  r.queries = v.size();
  // Offsets from the smallest value keep identical queries at exactly 0% spread.
  double s = 0.0;
  for (const double b : v) s += b - v.front();
  r.mean = v.front() + s / n;
  r.p90 = rank(0.90);
  r.p99 = rank(0.99);
  r.p90_delta_pct = r.mean == 0.0 ? 0.0 : (r.p90 - r.mean) / r.mean * 100.0;
  r.p99_delta_pct = r.mean == 0.0 ? 0.0 : (r.p99 - r.mean) / r.mean * 100.0;
  return r;
}

QosReport qos_stats(std::span<const DecodeTrace> traces, double target) {
  std::vector<double> bits;
  for (const auto& t : traces) {
    if (!t.steps.empty()) bits.push_back(t.mean_effective_bits());
  }
  return qos_stats(bits, target);
}

void write_trace_csv(const DecodeTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,position,layer,bit,estimate\n";
  out.precision(17);
  for (std::size_t s = 0; s < trace.steps.size(); ++s) {
    const auto& st = trace.steps[s];
    for (std::size_t i = 0; i < trace.layers.size(); ++i) {
      out << s << ',' << st.position << ',' << trace.layers[i].name() << ','
          << static_cast<unsigned>(st.bits[i]) << ',' << st.estimates[i] << '\n';
    }
  }
}

std::string trace_summary_json(const DecodeTrace& trace) {
  double lo = 0.0, hi = 0.0;
  if (!trace.steps.empty()) {
    lo = hi = trace.steps.front().effective_bits;
    for (const auto& st : trace.steps) {
      lo = std::min(lo, st.effective_bits);
      hi = std::max(hi, st.effective_bits);
    }
  }
  json layers = json::array();
  for (std::size_t i = 0; i < trace.layers.size(); ++i) {
    const LayerId id = trace.layers[i];
    json lj{{"name", id.name()}};
    std::map<unsigned, std::size_t> hist;
    for (const auto& st : trace.steps) ++hist[st.bits[i]];
    json h = json::object();
    for (const auto& [b, c] : hist) h[std::to_string(b)] = c;
    lj["bit_counts"] = h;
    if (const auto it = trace.audit.find(id); it != trace.audit.end()) {
      lj["high_steps"] = it->second.high;
      lj["exact_error_sum"] = it->second.exact_sum;
      lj["incurred_error"] = it->second.incurred;
      lj["reference_error"] = it->second.reference_error;
      lj["fallbacks"] = it->second.fallbacks;
    }
    layers.push_back(std::move(lj));
  }
  const json j{{"format", "dpllm-trace"},
               {"version", 1},
               {"steps", trace.steps.size()},
               {"mean_effective_bits", trace.mean_effective_bits()},
               {"min_effective_bits", lo},
               {"max_effective_bits", hi},
               {"estimator_ops", trace.total_estimator_ops()},
               {"layers", layers}};
  return j.dump(1);
}

}  // namespace dpllm
