#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "dpllm/pipeline.hpp"
#include "json.hpp"
#include "test_util.hpp"

namespace dpllm {
namespace {

using json = nlohmann::json;

const fs::path kCorpus = fs::path(DPLLM_SOURCE_DIR) / "data" / "toy_corpus.txt";

// A small chain: d = 16 model, short samples, cheap estimators.
json small_config_json(const fs::path& dir) {
  return {{"paths", {{"work_dir", (dir / "run").string()}, {"corpus", kCorpus.string()}}},
          {"model",
           {{"seed", 3}, {"n_blocks", 2}, {"d_model", 16}, {"n_heads", 2}, {"d_ff", 24}, {"seq_cap", 64}}},
          {"targets", {3.5, 4.25}},
          {"corpus_split", {{"calib_samples", 16}, {"calib_len", 32}, {"eval_len", 32}}},
          {"fit", {{"epochs", 2}}},
          {"estimator", {{"k", 8}, {"calib_epochs", 20}, {"max_inputs", 128}}}};
}

RunConfig write_config(const fs::path& dir, const json& j) {
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << j.dump(2);
  return load_run_config(dir / "cfg.json");
}

TEST(RunConfig, DefaultsAsDocumented) {
  const RunConfig c;
  EXPECT_EQ(c.n_bits, 6u);
  EXPECT_EQ(c.b_min, 3u);
  EXPECT_EQ(c.fit.epochs, 5u);
  EXPECT_EQ(c.fit.lr, 0.01);
  EXPECT_EQ(c.fit.alpha, 1.0);
  EXPECT_EQ(c.estimator.k, 64u);
  EXPECT_EQ(c.estimator.r2_gate, 0.9);
  EXPECT_TRUE(c.estimator.async);
}

TEST(RunConfig, BundledConfigLoadsAndRoundTrips) {
  const auto c = load_run_config(fs::path(DPLLM_SOURCE_DIR) / "data" / "toy_config.json");
  EXPECT_EQ(c.model.d_model, 64u);
  EXPECT_EQ(c.targets, (std::vector<double>{3.25, 3.5, 4.0, 4.5}));
  EXPECT_TRUE(fs::exists(c.resolve(c.corpus)));
  const auto again = run_config_from_json(run_config_to_json(c), c.base_dir);
  EXPECT_EQ(run_config_to_json(again), run_config_to_json(c));
}

TEST(RunConfig, Rejections) {
  const fs::path base = ".";
  EXPECT_THROW(run_config_from_json("{\"bogus\": 1, \"paths\": {\"corpus\": \"x\"}}", base), ConfigError);
  EXPECT_THROW(run_config_from_json("{\"fit\": {\"alhpa\": 1}, \"paths\": {\"corpus\": \"x\"}}", base),
               ConfigError);
  EXPECT_THROW(run_config_from_json("{\"quant\": {\"b_min\": 1}, \"paths\": {\"corpus\": \"x\"}}", base),
               ConfigError);
  EXPECT_THROW(run_config_from_json("{\"targets\": [2.5], \"paths\": {\"corpus\": \"x\"}}", base),
               ConfigError);
  EXPECT_THROW(run_config_from_json("not json", base), ConfigError);
  EXPECT_THROW(run_config_from_json("{}", base), ConfigError);  // no corpus
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), 2);
  EXPECT_EQ(exit_code_for(InfeasibleError("x")), 3);
  EXPECT_EQ(exit_code_for(ProvenanceError("x")), 4);
  EXPECT_EQ(exit_code_for(IoError("x")), 1);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), 1);
}

TEST(Baselines, FirstAndSecondOrderDisagreeOnConstructedInstance) {
  const auto w = init_model(2, testing_util::small_config());
  const auto store = BitPlaneStore::build(w, 6, 3);
  SensitivityProfile prof;
  const double n = static_cast<double>(store.layers().size());
  double i = 0.0;
  // First-order sensitivity rises with layer index, the trace-based one falls.
  for (const auto& [id, q] : store.layers()) {
    for (unsigned b = 3; b <= 6; ++b) {
      const double decay = std::ldexp(1.0, -static_cast<int>(b));
      prof.first_order[id][b] = (1.0 + i) * decay;
      prof.hawq[id][b] = (n - i) * decay;
      prof.second_order[id][b] = decay;
    }
    i += 1.0;
  }
  const auto a = static_plan_llm_mq(prof, store, 4.0);
  const auto b = static_plan_hawq(prof, store, 4.0);
  EXPECT_NE(a.bits, b.bits);
  EXPECT_LE(std::abs(a.achieved_avg - 4.0), 0.005 * (1 + 1e-9));
  EXPECT_LE(std::abs(b.achieved_avg - 4.0), 0.005 * (1 + 1e-9));
}

class PipelineFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(testing_util::temp_dir("pipeline"));
    cfg_ = new RunConfig(write_config(*dir_, small_config_json(*dir_)));
    cmd_init(*cfg_);
    store_hash_ = cmd_quantize(*cfg_);
    cmd_profile(*cfg_);
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete dir_;
  }
  static fs::path* dir_;
  static RunConfig* cfg_;
  static std::uint64_t store_hash_;
};
fs::path* PipelineFixture::dir_ = nullptr;
RunConfig* PipelineFixture::cfg_ = nullptr;
std::uint64_t PipelineFixture::store_hash_ = 0;

TEST_F(PipelineFixture, QuantizeIsIdempotentAndRoundTrips) {
  EXPECT_EQ(cmd_quantize(*cfg_), store_hash_);
  EXPECT_EQ(BitPlaneStore::load(cfg_->store_path()).content_hash(), store_hash_);
  EXPECT_EQ(hash_file(cfg_->store_path()), store_hash_);
}

TEST_F(PipelineFixture, MissingManifestIsConfigError) {
  RunConfig c = *cfg_;
  c.model_manifest = *dir_ / "nope.json";
  EXPECT_THROW(cmd_quantize(c), ConfigError);
}

TEST_F(PipelineFixture, ProfileDeterministicAndComplete) {
  const auto h1 = hash_file(cfg_->profile_path());
  const auto p = cmd_profile(*cfg_);
  EXPECT_EQ(hash_file(cfg_->profile_path()), h1);
  EXPECT_EQ(p.n_samples, 16u);
  const auto store = BitPlaneStore::load(cfg_->store_path());
  for (const auto& [id, q] : store.layers()) {
    for (unsigned b = 3; b <= 6; ++b) {
      for (const auto kind : {ScoreKind::SecondOrder, ScoreKind::FirstOrder, ScoreKind::Hawq}) {
        EXPECT_TRUE(std::isfinite(p.score(kind, id, b)));
      }
    }
  }
}

TEST_F(PipelineFixture, DoublingCalibrationCorpusDoublesSamples) {
  const fs::path d = *dir_ / "double";
  fs::create_directories(d);
  const auto bytes = read_file_bytes(kCorpus);
  const std::string text(bytes.begin(), bytes.begin() + 2048);
  std::ofstream(d / "one.txt") << text;
  std::ofstream(d / "two.txt") << text << text;
  RunConfig c = *cfg_;
  c.profile = d / "profile.bin";
  c.calib_corpus = d / "one.txt";
  const auto one = cmd_profile(c);
  c.calib_corpus = d / "two.txt";
  const auto two = cmd_profile(c);
  EXPECT_EQ(two.n_samples, 2 * one.n_samples);
}

TEST_F(PipelineFixture, PlansEvalAndProvenance) {
  PlanContext ctx;
  std::vector<fs::path> plans;
  for (const std::string m : {"dp", "llm_mq", "hawq_v2"}) {
    for (const double t : cfg_->targets) {
      const auto out = cmd_plan(*cfg_, m, t, &ctx);
      if (m == "dp") {
        EXPECT_LE(std::abs(out.plan.expected_bits() - t), cfg_->fit_gate) << t;
      } else {
        const double got = out.plan.fit.at("achieved_bits");
        EXPECT_TRUE(std::abs(got - t) <= 0.005 * (1 + 1e-9) || !out.plan.warnings.empty());
      }
      EXPECT_EQ(load_plan(out.path).content_hash(), out.plan.content_hash());
      plans.push_back(out.path);
    }
  }
  const auto rep = cmd_eval(*cfg_, plans);
  ASSERT_EQ(rep.cells.size(), 6u);
  for (const auto& c : rep.cells) {
    EXPECT_FALSE(c.plan_hash.empty());
    EXPECT_TRUE(std::isfinite(c.approx.perplexity));
    EXPECT_TRUE(std::isfinite(c.exact.perplexity));
    EXPECT_TRUE(std::isfinite(c.approx.qos.p99_delta_pct));
    if (c.method == "dp") {
      EXPECT_LE(c.exact.incurred_error, c.exact.matched_static_error * (1 + 1e-12));
      EXPECT_GT(c.approx.ops_per_token, 0.0);
    } else {
      EXPECT_EQ(c.approx.ops_per_token, 0.0);
      EXPECT_EQ(c.approx.qos.p99_delta_pct, 0.0);
    }
  }
  EXPECT_TRUE(fs::exists(cfg_->reports_path() / "report.csv"));
  const auto js = json::parse(std::ifstream(cfg_->reports_path() / "report.json"));
  EXPECT_EQ(js.at("cells").size(), 6u);

  const auto dec = cmd_decode(*cfg_, plans.front(), "The ", 5);
  EXPECT_EQ(dec.text.size(), 5u);
  EXPECT_TRUE(fs::exists(cfg_->reports_path() / "decode_trace.csv"));

  // A store rebuilt from a different model breaks the chain.
  RunConfig other = *cfg_;
  other.work_dir = *dir_ / "other";
  other.model_seed = 99;
  cmd_init(other);
  cmd_quantize(other);
  EXPECT_THROW(cmd_eval(other, {plans.front()}), ProvenanceError);
  EXPECT_THROW(cmd_decode(other, plans.front(), "x", 2), ProvenanceError);
  // Profile of another chain is refused at plan time.
  RunConfig mixed = *cfg_;
  mixed.store = other.store_path();
  mixed.model_manifest = other.model_path();
  EXPECT_THROW(cmd_plan(mixed, "llm_mq", 4.0), ProvenanceError);
}

TEST_F(PipelineFixture, SentinelForcedDpRowEqualsStaticRow) {
  const auto dp = cmd_plan(*cfg_, "dp", 4.25).plan;
  // Force every layer to its lower bit and compare with that static assignment.
  std::map<LayerId, unsigned> bits;
  PrecisionPlan forced = dp;
  for (auto& [id, L] : forced.layers) {
    bits[id] = L.is_static() ? L.static_bit() : L.l;
    if (!L.is_static()) {
      L.threshold = kInf;
      L.estimator.reset();
    }
  }
  const auto w = load_weights(cfg_->model_path());
  const auto store = BitPlaneStore::load(cfg_->store_path());
  const auto corp = load_corpora(*cfg_);
  const auto a = evaluate_plan(forced, w, store, corp.eval);
  const auto b = evaluate_plan(static_plan(bits, store, "static", 0.0), w, store, corp.eval);
  EXPECT_EQ(a.perplexity, b.perplexity);
  EXPECT_EQ(a.effective_bits, b.effective_bits);
  EXPECT_EQ(a.reference_error, b.reference_error);
}

TEST_F(PipelineFixture, CliExitCodes) {
  const std::string cli = DPLLM_CLI;
  const fs::path cfg = *dir_ / "cfg.json";
  auto run = [&](const std::string& args) {
    const int st = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(st);
  };
  EXPECT_EQ(run("-c " + cfg.string() + " plan -m llm_mq -t 4.0"), 0);
  EXPECT_EQ(run("-c " + (*dir_ / "missing.json").string() + " quantize"), 2);
  EXPECT_EQ(run("-c " + cfg.string() + " --set quant.b_min=1 quantize"), 2);
  EXPECT_EQ(run("-c " + cfg.string() + " plan -m llm_mq -t 2.5"), 3);
  EXPECT_EQ(run("-c " + cfg.string() + " --set targets=[3.5] plan -m dp -t 5.5"), 3);
  RunConfig other = *cfg_;
  other.work_dir = *dir_ / "foreign";
  other.model_seed = 98;
  cmd_init(other);
  const fs::path foreign = other.store_path();
  cmd_quantize(other);
  EXPECT_EQ(run("-c " + cfg.string() + " --set paths.store=" + foreign.string() + " eval " +
                (cfg_->plans_path() / "llm_mq_4.00.json").string()),
            4);
}

}  // namespace
}  // namespace dpllm
