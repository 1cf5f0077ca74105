#include "dpllm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "json.hpp"

namespace dpllm {

using json = nlohmann::json;

namespace {

void log_line(const std::string& s) { std::clog << "[dpllm] " << s << '\n'; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(prec) << v;
  return o.str();
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
}

std::string read_text(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return std::string(b.begin(), b.end());
}

std::vector<std::vector<Token>> chunk(std::string_view text, std::size_t len, std::size_t max_n) {
  std::vector<std::vector<Token>> out;
  for (std::size_t s = 0; s + len <= text.size() && out.size() < max_n; s += len) {
    std::vector<Token> t(len);
    for (std::size_t i = 0; i < len; ++i) t[i] = static_cast<unsigned char>(text[s + i]);
    out.push_back(std::move(t));
  }
  return out;
}

std::uint64_t hash_text(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

ModelWeights load_model(const RunConfig& cfg) {
  require_file(cfg.model_path(), "model manifest");
  return load_weights(cfg.model_path());
}

BitPlaneStore load_store(const RunConfig& cfg, const ModelWeights& weights) {
  require_file(cfg.store_path(), "quantized store");
  auto store = BitPlaneStore::load(cfg.store_path());
  if (store.model_hash() != weights.checksum()) {
    throw ProvenanceError("store " + cfg.store_path().string() + " was built from model " +
                          hex64(store.model_hash()) + ", loaded model is " +
                          hex64(weights.checksum()));
  }
  return store;
}

SensitivityProfile load_checked_profile(const RunConfig& cfg, const ModelWeights& weights,
                                        const BitPlaneStore& store) {
  require_file(cfg.profile_path(), "sensitivity profile");
  auto prof = load_profile(cfg.profile_path());
  if (prof.model_hash != weights.checksum() || prof.store_hash != store.content_hash()) {
    throw ProvenanceError("profile " + cfg.profile_path().string() +
                          " was computed for a different model or store");
  }
  return prof;
}

std::string plan_file_name(const std::string& method, double target) {
  std::ostringstream o;
  o << method << '_' << std::fixed << std::setprecision(2) << target << ".json";
  return o.str();
}

json qos_json(const QosReport& q) {
  return {{"target", q.target},
          {"mean", q.mean},
          {"p90", q.p90},
          {"p99", q.p99},
          {"p90_delta_pct", q.p90_delta_pct},
          {"p99_delta_pct", q.p99_delta_pct},
          {"queries", q.queries}};
}

json metrics_json(const VariantMetrics& m) {
  return {{"perplexity", m.perplexity},
          {"loss", m.loss},
          {"effective_bits", m.effective_bits},
          {"incurred_error", m.incurred_error},
          {"matched_static_error", m.matched_static_error},
          {"reference_error", m.reference_error},
          {"ops_per_token", m.ops_per_token},
          {"h_steps", m.h_steps},
          {"steps", m.steps},
          {"qos", qos_json(m.qos)}};
}

}  // namespace

fs::path RunConfig::resolve(const fs::path& p) const {
  if (p.empty() || p.is_absolute()) return p;
  return (base_dir / p).lexically_normal();
}
fs::path RunConfig::model_path() const {
  return model_manifest.empty() ? resolve(work_dir) / "model.json" : resolve(model_manifest);
}
fs::path RunConfig::store_path() const {
  return store.empty() ? resolve(work_dir) / "store.bin" : resolve(store);
}
fs::path RunConfig::profile_path() const {
  return profile.empty() ? resolve(work_dir) / "profile.bin" : resolve(profile);
}
fs::path RunConfig::plans_path() const {
  return plan_dir.empty() ? resolve(work_dir) / "plans" : resolve(plan_dir);
}
fs::path RunConfig::reports_path() const {
  return report_dir.empty() ? resolve(work_dir) / "reports" : resolve(report_dir);
}

void RunConfig::validate() const {
  model.validate();
  if (b_min < kMinSupportedBits || n_bits > kMaxSupportedBits || b_min >= n_bits) {
    throw ConfigError("need " + std::to_string(kMinSupportedBits) + " <= b_min < n_bits <= " +
                      std::to_string(kMaxSupportedBits));
  }
  if (budget_bits < b_min || budget_bits > n_bits) throw ConfigError("budget_bits outside [b_min, n_bits]");
  for (const double t : targets) {
    if (!(t >= b_min && t <= n_bits)) throw ConfigError("target " + fmt(t, 2) + " outside [b_min, n_bits]");
  }
  for (const auto& m : methods) {
    if (m != "dp" && m != "llm_mq" && m != "hawq_v2") throw ConfigError("unknown method " + m);
  }
  if (calib_len < 2 || eval_len < 2) throw ConfigError("sample lengths must be at least 2");
  if (calib_len > model.seq_cap || eval_len > model.seq_cap) {
    throw ConfigError("sample length exceeds the model context");
  }
  if (calib_samples == 0) throw ConfigError("calib_samples must be positive");
  if (fit.epochs == 0 || fit.lr <= 0.0 || fit.batch_size == 0 || fit.alpha < 0.0) {
    throw ConfigError("bad fit hyperparameters");
  }
  if (estimator.k == 0) throw ConfigError("projection dimension k must be positive");
  if (corpus.empty()) throw ConfigError("no corpus configured");
}

RunConfig default_run_config() { return RunConfig{}; }

std::string run_config_to_json(const RunConfig& c) {
  const json j{
      {"paths",
       {{"work_dir", c.work_dir.string()},
        {"model", c.model_manifest.string()},
        {"corpus", c.corpus.string()},
        {"calib_corpus", c.calib_corpus.string()},
        {"eval_corpus", c.eval_corpus.string()},
        {"store", c.store.string()},
        {"profile", c.profile.string()},
        {"plan_dir", c.plan_dir.string()},
        {"report_dir", c.report_dir.string()}}},
      {"model",
       {{"seed", c.model_seed},
        {"n_blocks", c.model.n_blocks},
        {"d_model", c.model.d_model},
        {"n_heads", c.model.n_heads},
        {"d_ff", c.model.d_ff},
        {"vocab", c.model.vocab},
        {"seq_cap", c.model.seq_cap},
        {"norm_eps", c.model.norm_eps}}},
      {"quant", {{"n_bits", c.n_bits}, {"b_min", c.b_min}}},
      {"budget_bits", c.budget_bits},
      {"targets", c.targets},
      {"methods", c.methods},
      {"corpus_split",
       {{"calib_samples", c.calib_samples}, {"calib_len", c.calib_len}, {"eval_len", c.eval_len}}},
      {"fit",
       {{"epochs", c.fit.epochs},
        {"lr", c.fit.lr},
        {"alpha", c.fit.alpha},
        {"beta1", c.fit.beta1},
        {"beta2", c.fit.beta2},
        {"adam_eps", c.fit.adam_eps},
        {"weight_decay", c.fit.weight_decay},
        {"batch_size", c.fit.batch_size},
        {"seed", c.fit.seed},
        {"gate", c.fit_gate},
        {"alpha_retry", c.alpha_retry}}},
      {"estimator",
       {{"mode", c.estimator.mode == EstimatorMode::Exact ? "exact" : "hybrid"},
        {"k", c.estimator.k},
        {"r2_gate", c.estimator.r2_gate},
        {"seed", c.estimator.seed},
        {"async", c.estimator.async},
        {"async_mode", async_mode_name(c.async_mode)},
        {"prime_from_prefill", c.prime_from_prefill},
        {"max_inputs", c.max_inputs},
        {"calib_epochs", c.estimator.calibration.epochs},
        {"calib_step", c.estimator.calibration.step},
        {"calib_patience", c.estimator.calibration.patience}}},
      {"decode", {{"prompt", c.prompt}, {"n_new", c.n_new}}},
  };
  return j.dump(2);
}

RunConfig run_config_from_json(std::string_view text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig c;
  c.base_dir = base_dir;
  // Each section is read through a visitor that rejects keys it does not know.
  auto section = [&](const char* name, auto&& fn) {
    if (!j.contains(name)) return;
    const json& s = j.at(name);
    if (!s.is_object()) throw ConfigError(std::string("config: '") + name + "' must be an object");
    for (const auto& [k, v] : s.items()) {
      if (!fn(k, v)) throw ConfigError(std::string("config: unknown key ") + name + "." + k);
    }
  };
  try {
    for (const auto& [k, v] : j.items()) {
      static const std::vector<std::string> known{"paths",      "model", "quant",  "budget_bits",
                                                  "targets",    "methods", "corpus_split", "fit",
                                                  "estimator",  "decode"};
      if (std::find(known.begin(), known.end(), k) == known.end()) {
        throw ConfigError("config: unknown key " + k);
      }
    }
    section("paths", [&](const std::string& k, const json& v) {
      const fs::path p = v.get<std::string>();
      if (k == "work_dir") c.work_dir = p;
      else if (k == "model") c.model_manifest = p;
      else if (k == "corpus") c.corpus = p;
      else if (k == "calib_corpus") c.calib_corpus = p;
      else if (k == "eval_corpus") c.eval_corpus = p;
      else if (k == "store") c.store = p;
      else if (k == "profile") c.profile = p;
      else if (k == "plan_dir") c.plan_dir = p;
      else if (k == "report_dir") c.report_dir = p;
      else return false;
      return true;
    });
    section("model", [&](const std::string& k, const json& v) {
      if (k == "seed") c.model_seed = v.get<std::uint64_t>();
      else if (k == "n_blocks") c.model.n_blocks = v.get<std::size_t>();
      else if (k == "d_model") c.model.d_model = v.get<std::size_t>();
      else if (k == "n_heads") c.model.n_heads = v.get<std::size_t>();
      else if (k == "d_ff") c.model.d_ff = v.get<std::size_t>();
      else if (k == "vocab") c.model.vocab = v.get<std::size_t>();
      else if (k == "seq_cap") c.model.seq_cap = v.get<std::size_t>();
      else if (k == "norm_eps") c.model.norm_eps = v.get<double>();
      else return false;
      return true;
    });
    section("quant", [&](const std::string& k, const json& v) {
      if (k == "n_bits") c.n_bits = v.get<unsigned>();
      else if (k == "b_min") c.b_min = v.get<unsigned>();
      else return false;
      return true;
    });
    if (j.contains("budget_bits")) c.budget_bits = j.at("budget_bits").get<double>();
    if (j.contains("targets")) c.targets = j.at("targets").get<std::vector<double>>();
    if (j.contains("methods")) c.methods = j.at("methods").get<std::vector<std::string>>();
    section("corpus_split", [&](const std::string& k, const json& v) {
      if (k == "calib_samples") c.calib_samples = v.get<std::size_t>();
      else if (k == "calib_len") c.calib_len = v.get<std::size_t>();
      else if (k == "eval_len") c.eval_len = v.get<std::size_t>();
      else return false;
      return true;
    });
    section("fit", [&](const std::string& k, const json& v) {
      if (k == "epochs") c.fit.epochs = v.get<std::size_t>();
      else if (k == "lr") c.fit.lr = v.get<double>();
      else if (k == "alpha") c.fit.alpha = v.get<double>();
      else if (k == "beta1") c.fit.beta1 = v.get<double>();
      else if (k == "beta2") c.fit.beta2 = v.get<double>();
      else if (k == "adam_eps") c.fit.adam_eps = v.get<double>();
      else if (k == "weight_decay") c.fit.weight_decay = v.get<double>();
      else if (k == "batch_size") c.fit.batch_size = v.get<std::size_t>();
      else if (k == "seed") c.fit.seed = v.get<std::uint64_t>();
      else if (k == "gate") c.fit_gate = v.get<double>();
      else if (k == "alpha_retry") c.alpha_retry = v.get<double>();
      else return false;
      return true;
    });
    section("estimator", [&](const std::string& k, const json& v) {
      if (k == "mode") {
        const auto m = v.get<std::string>();
        if (m == "exact") c.estimator.mode = EstimatorMode::Exact;
        else if (m == "hybrid") c.estimator.mode = EstimatorMode::Hybrid;
        else throw ConfigError("config: estimator.mode must be exact or hybrid");
      } else if (k == "k") c.estimator.k = v.get<std::size_t>();
      else if (k == "r2_gate") c.estimator.r2_gate = v.get<double>();
      else if (k == "seed") c.estimator.seed = v.get<std::uint64_t>();
      else if (k == "async") c.estimator.async = v.get<bool>();
      else if (k == "async_mode") c.async_mode = parse_async_mode(v.get<std::string>());
      else if (k == "prime_from_prefill") c.prime_from_prefill = v.get<bool>();
      else if (k == "max_inputs") c.max_inputs = v.get<std::size_t>();
      else if (k == "calib_epochs") c.estimator.calibration.epochs = v.get<std::size_t>();
      else if (k == "calib_step") c.estimator.calibration.step = v.get<double>();
      else if (k == "calib_patience") c.estimator.calibration.patience = v.get<std::size_t>();
      else return false;
      return true;
    });
    section("decode", [&](const std::string& k, const json& v) {
      if (k == "prompt") c.prompt = v.get<std::string>();
      else if (k == "n_new") c.n_new = v.get<std::size_t>();
      else return false;
      return true;
    });
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  require_file(path, "config");
  return run_config_from_json(read_text(path), path.parent_path().empty() ? "." : path.parent_path());
}

Corpora load_corpora(const RunConfig& cfg) {
  Corpora out;
  std::string calib_text, eval_text;
  const std::size_t head = cfg.calib_samples * cfg.calib_len;
  if (!cfg.calib_corpus.empty()) {
    require_file(cfg.resolve(cfg.calib_corpus), "calibration corpus");
    calib_text = read_text(cfg.resolve(cfg.calib_corpus));
  }
  if (!cfg.eval_corpus.empty()) {
    require_file(cfg.resolve(cfg.eval_corpus), "evaluation corpus");
    eval_text = read_text(cfg.resolve(cfg.eval_corpus));
  }
  if (cfg.calib_corpus.empty() || cfg.eval_corpus.empty()) {
    require_file(cfg.resolve(cfg.corpus), "corpus");
    const std::string text = read_text(cfg.resolve(cfg.corpus));
    if (cfg.calib_corpus.empty()) calib_text = text.substr(0, std::min(head, text.size()));
    if (cfg.eval_corpus.empty()) eval_text = text.size() > head ? text.substr(head) : std::string();
  }
  // A dedicated calibration file is used in full; the shared corpus gives up
  // only its first calib_samples samples.
  const std::size_t max_calib =
      cfg.calib_corpus.empty() ? cfg.calib_samples : static_cast<std::size_t>(-1);
  out.calib = chunk(calib_text, cfg.calib_len, max_calib);
  out.eval = chunk(eval_text, cfg.eval_len, static_cast<std::size_t>(-1));
  if (out.calib.empty()) throw ConfigError("calibration corpus shorter than one sample");
  if (out.eval.empty()) throw ConfigError("evaluation corpus shorter than one query");
  out.calib_hash = hash_text(calib_text.substr(0, out.calib.size() * cfg.calib_len));
  out.eval_hash = hash_text(eval_text.substr(0, out.eval.size() * cfg.eval_len));
  return out;
}

fs::path cmd_init(const RunConfig& cfg) {
  cfg.validate();
  const fs::path path = cfg.model_path();
  fs::create_directories(path.parent_path());
  const auto w = init_model(cfg.model_seed, cfg.model);
  export_weights(w, path);
  log_line("model " + hex64(load_weights(path).checksum()) + " -> " + path.string());
  return path;
}

std::uint64_t cmd_quantize(const RunConfig& cfg) {
  cfg.validate();
  const auto w = load_model(cfg);
  const auto store = BitPlaneStore::build(w, cfg.n_bits, cfg.b_min);
  fs::create_directories(cfg.store_path().parent_path());
  store.save(cfg.store_path());
  const std::uint64_t h = store.content_hash();
  log_line("store " + hex64(h) + " -> " + cfg.store_path().string());
  return h;
}

SensitivityProfile cmd_profile(const RunConfig& cfg) {
  cfg.validate();
  const auto w = load_model(cfg);
  const auto store = load_store(cfg, w);
  const auto corp = load_corpora(cfg);
  auto prof = profile(w, store, corp.calib, corp.calib_hash);
  fs::create_directories(cfg.profile_path().parent_path());
  save_profile(prof, cfg.profile_path());
  log_line("profile over " + std::to_string(prof.n_samples) + " samples -> " +
           cfg.profile_path().string());
  return prof;
}

PrecisionPlan with_exact_estimators(const PrecisionPlan& plan) {
  PrecisionPlan out = plan;
  out.estimator_mode = "exact";
  out.async = false;
  for (auto& [id, L] : out.layers) {
    if (!L.estimator) continue;
    ErrorEstimator e;
    e.kind = EstimatorKind::Exact;
    e.source = InputSource::Immediate;
    e.l = L.l;
    e.h = L.h;
    L.estimator = e;
  }
  return out;
}

PlanOutcome cmd_plan(const RunConfig& cfg, const std::string& method, double target,
                     PlanContext* ctx) {
  cfg.validate();
  const auto w = load_model(cfg);
  const auto store = load_store(cfg, w);
  const auto prof = load_checked_profile(cfg, w, store);
  const std::uint64_t profile_hash = hash_file(cfg.profile_path());

  PlanOutcome out;
  if (method == "llm_mq" || method == "hawq_v2") {
    const BitAssignment a = method == "llm_mq" ? static_plan_llm_mq(prof, store, target)
                                               : static_plan_hawq(prof, store, target);
    out.plan = static_plan(a.bits, store, method, target);
    out.plan.budget_bits = target;
    out.plan.fit["achieved_bits"] = a.achieved_avg;
    out.plan.fit["objective"] = a.objective;
    if (a.lower_bound_used) out.plan.fit["lower_bound"] = *a.lower_bound_used;
    if (a.warning) out.plan.warnings.push_back(a.note);
  } else if (method == "dp") {
    const auto corp = load_corpora(cfg);
    if (corp.calib_hash != prof.corpus_hash) {
      throw ProvenanceError("profile was computed on a different calibration corpus");
    }
    PlanContext local;
    PlanContext& c = ctx ? *ctx : local;
    if (!c.max_bits) c.max_bits = max_precision_plan(prof, store, cfg.budget_bits);
    const BitAssignment& maxb = *c.max_bits;

    FitHyper hyper = cfg.fit;
    FitResult fr = fit(w, store, maxb, corp.calib, target, hyper);
    const auto m = layer_params(store);
    double avg = fr.params.average(m);
    std::vector<std::string> warnings;
    if (std::abs(avg - target) > cfg.fit_gate && cfg.alpha_retry > 0.0) {
      warnings.push_back("fit missed the gate at alpha " + fmt(hyper.alpha, 2) + " (" + fmt(avg) +
                         "); retried at alpha " + fmt(cfg.alpha_retry, 2));
      hyper.alpha = cfg.alpha_retry;
      fr = fit(w, store, maxb, corp.calib, target, hyper);
      avg = fr.params.average(m);
    }
    if (std::abs(avg - target) > cfg.fit_gate) {
      warnings.push_back("fitted average " + fmt(avg) + " misses target " + fmt(target) +
                         " by more than " + fmt(cfg.fit_gate, 3));
    }
    PlanBuildOptions opt;
    opt.estimator = cfg.estimator;
    opt.async_mode = cfg.async_mode;
    opt.prime_from_prefill = cfg.prime_from_prefill;
    opt.max_inputs = cfg.max_inputs;
    out.plan = build_dynamic_plan(w, store, maxb.bits, fr.params.p, corp.calib, opt, target, &c.cache);
    out.plan.budget_bits = cfg.budget_bits;
    out.plan.warnings.insert(out.plan.warnings.begin(), warnings.begin(), warnings.end());
    out.plan.fit = {{"epochs", static_cast<double>(hyper.epochs)},
                    {"lr", hyper.lr},
                    {"alpha", hyper.alpha},
                    {"batch_size", static_cast<double>(hyper.batch_size)},
                    {"seed", static_cast<double>(hyper.seed)},
                    {"fitted_avg_bits", avg},
                    {"max_avg_bits", maxb.achieved_avg},
                    {"final_loss", fr.log.empty() ? 0.0 : fr.log.back().loss}};
    out.alpha_used = hyper.alpha;
    out.fit = std::move(fr);
  } else {
    throw ConfigError("unknown method " + method);
  }
  out.plan.provenance.profile_hash = profile_hash;
  out.plan.provenance.corpus_hash = prof.corpus_hash;
  out.plan.provenance.model_hash = w.checksum();
  out.plan.validate();

  fs::create_directories(cfg.plans_path());
  out.path = cfg.plans_path() / plan_file_name(method, target);
  save_plan(out.plan, out.path);
  if (out.fit) {
    write_fit_log_csv(out.fit->log, cfg.plans_path() / ("fit_" + fmt(target, 2) + ".csv"));
  }
  std::string msg = method + " @ " + fmt(target, 2) + ": expected " + fmt(out.plan.expected_bits()) +
                    " bits -> " + out.path.string();
  for (const auto& wmsg : out.plan.warnings) msg += "\n         warning: " + wmsg;
  log_line(msg);
  return out;
}

VariantMetrics evaluate_plan(const PrecisionPlan& plan, const ModelWeights& weights,
                             const BitPlaneStore& store, std::span<const std::vector<Token>> queries) {
  RuntimeOptions opt;
  opt.audit = true;
  const auto r = eval_dynamic(plan, weights, store, queries, opt);
  VariantMetrics m;
  m.loss = r.loss;
  m.perplexity = r.perplexity;
  double bits = 0.0;
  std::size_t ops = 0;
  for (const auto& tr : r.traces) {
    for (const auto& st : tr.steps) bits += st.effective_bits;
    m.steps += tr.steps.size();
    ops += tr.total_estimator_ops();
    for (const auto& [id, a] : tr.audit) {
      m.incurred_error += a.incurred;
      m.reference_error += a.reference_error;
      m.h_steps += a.high;
    }
  }
  // Matched comparator per layer over the whole query set.
  std::map<LayerId, std::pair<std::size_t, std::size_t>> rate;
  std::map<LayerId, double> exact;
  for (const auto& tr : r.traces) {
    for (const auto& [id, a] : tr.audit) {
      rate[id].first += a.high;
      rate[id].second += a.steps;
      exact[id] += a.exact_sum;
    }
  }
  for (const auto& [id, hs] : rate) {
    if (hs.second == 0) continue;
    const double h_rate = static_cast<double>(hs.first) / static_cast<double>(hs.second);
    m.matched_static_error += (1.0 - h_rate) * exact.at(id);
  }
  m.effective_bits = m.steps == 0 ? 0.0 : bits / static_cast<double>(m.steps);
  m.ops_per_token = m.steps == 0 ? 0.0 : static_cast<double>(ops) / static_cast<double>(m.steps);
  m.qos = qos_stats(r.traces, plan.target_bits);
  return m;
}

Report cmd_eval(const RunConfig& cfg, const std::vector<fs::path>& plans) {
  cfg.validate();
  if (plans.empty()) throw ConfigError("eval: no plans given");
  for (const auto& p : plans) require_file(p, "plan");
  const auto w = load_model(cfg);
  const auto store = load_store(cfg, w);
  const auto corp = load_corpora(cfg);
  std::optional<std::uint64_t> profile_hash;
  if (fs::exists(cfg.profile_path())) profile_hash = hash_file(cfg.profile_path());

  Report rep;
  rep.eval_queries = corp.eval.size();
  DenseProvider dense(w);
  const auto fp = eval_with_provider(w, dense, corp.eval);
  rep.fp_perplexity = fp.perplexity;
  rep.eval_predictions = fp.predictions;

  for (const auto& path : plans) {
    const auto plan = load_plan(path);
    plan.check_against(w, store);
    if (profile_hash && plan.provenance.profile_hash != *profile_hash) {
      throw ProvenanceError("plan " + path.string() + " was built from a different profile");
    }
    ReportCell cell;
    cell.method = plan.method;
    cell.target = plan.target_bits;
    cell.plan_hash = hex64(plan.content_hash());
    cell.expected_bits = plan.expected_bits();
    cell.warnings = plan.warnings;
    cell.approx = evaluate_plan(plan, w, store, corp.eval);
    const bool has_estimators = std::any_of(plan.layers.begin(), plan.layers.end(),
                                            [](const auto& kv) { return kv.second.estimator.has_value(); });
    if (has_estimators && plan.estimator_mode != "exact") {
      const auto ex = with_exact_estimators(plan);
      cell.exact_plan_hash = hex64(ex.content_hash());
      cell.exact = evaluate_plan(ex, w, store, corp.eval);
    } else {
      cell.exact_plan_hash = cell.plan_hash;
      cell.exact = cell.approx;
    }
    log_line(cell.method + " @ " + fmt(cell.target, 2) + ": ppl " + fmt(cell.approx.perplexity, 3) +
             " (exact " + fmt(cell.exact.perplexity, 3) + "), bits " +
             fmt(cell.approx.effective_bits) + ", p99 +" + fmt(cell.approx.qos.p99_delta_pct, 2) + "%");
    rep.cells.push_back(std::move(cell));
  }

  std::map<double, std::vector<const ReportCell*>> by_target;
  for (const auto& c : rep.cells) by_target[c.target].push_back(&c);
  for (auto& [t, cells] : by_target) {
    std::stable_sort(cells.begin(), cells.end(), [](const ReportCell* a, const ReportCell* b) {
      return a->approx.perplexity < b->approx.perplexity;
    });
    std::string s = fmt(t, 2) + ":";
    for (const auto* c : cells) s += " " + c->method;
    rep.perplexity_order.push_back(s);
  }
  write_report(rep, cfg.reports_path());
  return rep;
}

DecodeOutcome cmd_decode(const RunConfig& cfg, const fs::path& plan_path, const std::string& prompt,
                         std::size_t n_new) {
  cfg.validate();
  require_file(plan_path, "plan");
  const auto w = load_model(cfg);
  const auto store = load_store(cfg, w);
  const auto plan = load_plan(plan_path);
  std::vector<Token> toks;
  for (const unsigned char ch : prompt) toks.push_back(ch);
  RuntimeOptions opt;
  opt.audit = true;
  DecodeOutcome out;
  out.result = decode(plan, w, store, toks, n_new, opt);
  for (const Token t : out.result.tokens) out.text.push_back(static_cast<char>(t));
  fs::create_directories(cfg.reports_path());
  write_trace_csv(out.result.trace, cfg.reports_path() / "decode_trace.csv");
  const std::string js = trace_summary_json(out.result.trace);
  write_file_bytes(cfg.reports_path() / "decode_trace.json",
                   std::span(reinterpret_cast<const std::uint8_t*>(js.data()), js.size()));
  return out;
}

Report cmd_report(const RunConfig& cfg) {
  cfg.validate();
  if (!fs::exists(cfg.model_path())) cmd_init(cfg);
  cmd_quantize(cfg);
  cmd_profile(cfg);
  PlanContext ctx;
  std::vector<fs::path> plans;
  for (const auto& method : cfg.methods) {
    for (const double t : cfg.targets) plans.push_back(cmd_plan(cfg, method, t, &ctx).path);
  }
  log_line("estimator cache hits: " + std::to_string(ctx.cache.hits));
  return cmd_eval(cfg, plans);
}

std::string report_to_json(const Report& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"method", c.method},
                     {"target", c.target},
                     {"plan_hash", c.plan_hash},
                     {"exact_plan_hash", c.exact_plan_hash},
                     {"expected_bits", c.expected_bits},
                     {"approx", metrics_json(c.approx)},
                     {"exact", metrics_json(c.exact)},
                     {"warnings", c.warnings}});
  }
  const json j{{"format", "dpllm-report"},
               {"version", 1},
               {"fp_perplexity", r.fp_perplexity},
               {"eval_queries", r.eval_queries},
               {"eval_predictions", r.eval_predictions},
               {"perplexity_order", r.perplexity_order},
               {"cells", cells}};
  return j.dump(2);
}

void write_report(const Report& r, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "report.csv");
  if (!csv) throw IoError("cannot write " + (dir / "report.csv").string());
  csv << "method,target,plan_hash,expected_bits,"
         "ppl,eff_bits,incurred_error,matched_static_error,reference_error,ops_per_token,"
         "ppl_exact,eff_bits_exact,incurred_error_exact,matched_static_error_exact,ops_per_token_exact,"
         "qos_mean,qos_p90,qos_p99,qos_p90_delta_pct,qos_p99_delta_pct,warnings\n";
  csv.precision(10);
  for (const auto& c : r.cells) {
    const auto& a = c.approx;
    const auto& e = c.exact;
    csv << c.method << ',' << c.target << ',' << c.plan_hash << ',' << c.expected_bits << ','
        << a.perplexity << ',' << a.effective_bits << ',' << a.incurred_error << ','
        << a.matched_static_error << ',' << a.reference_error << ',' << a.ops_per_token << ','
        << e.perplexity << ',' << e.effective_bits << ',' << e.incurred_error << ','
        << e.matched_static_error << ',' << e.ops_per_token << ',' << a.qos.mean << ','
        << a.qos.p90 << ',' << a.qos.p99 << ',' << a.qos.p90_delta_pct << ','
        << a.qos.p99_delta_pct << ',' << c.warnings.size() << '\n';
  }
  const std::string js = report_to_json(r);
  write_file_bytes(dir / "report.json",
                   std::span(reinterpret_cast<const std::uint8_t*>(js.data()), js.size()));
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const InfeasibleError*>(&e)) return 3;
  if (dynamic_cast<const ProvenanceError*>(&e)) return 4;
  return 1;
}

}  // namespace dpllm
