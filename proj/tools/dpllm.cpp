// Command-line front end over the pipeline commands.

#include <iostream>

#include "CLI11.hpp"
#include "dpllm/pipeline.hpp"
#include "json.hpp"

namespace {

using json = nlohmann::json;

// "fit.alpha=10" sets j["fit"]["alpha"]; values parse as JSON when they can.
void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw dpllm::ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

dpllm::RunConfig build_config(const std::string& path, const std::vector<std::string>& sets,
                              const std::string& work_dir) {
  if (!std::filesystem::exists(path)) throw dpllm::ConfigError("config not found: " + path);
  const auto bytes = dpllm::read_file_bytes(path);
  json j = json::parse(std::string(bytes.begin(), bytes.end()), nullptr, false);
  if (j.is_discarded()) throw dpllm::ConfigError("config is not valid JSON: " + path);
  for (const auto& s : sets) apply_override(j, s);
  if (!work_dir.empty()) {
    // Given on the command line, so relative to the working directory.
    j["paths"]["work_dir"] = std::filesystem::absolute(work_dir).string();
  }
  const auto parent = std::filesystem::path(path).parent_path();
  return dpllm::run_config_from_json(j.dump(), parent.empty() ? "." : parent);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic-precision inference toolkit for nested-quantized models"};
  app.require_subcommand(1);
  std::string config_path = "data/toy_config.json";
  std::vector<std::string> sets;
  std::string work_dir;
  app.add_option("-c,--config", config_path, "Run configuration (JSON)")->capture_default_str();
  app.add_option("--set", sets, "Override a config value, e.g. --set fit.alpha=10");
  app.add_option("-w,--work-dir", work_dir, "Directory for model, store, profile, plans, reports");

  auto* init = app.add_subcommand("init", "Write the toy model's weight manifest");
  auto* quantize = app.add_subcommand("quantize", "Build the nested-quantization store");
  auto* profile = app.add_subcommand("profile", "Compute sensitivity scores on the calibration set");

  auto* plan = app.add_subcommand("plan", "Build a precision plan for one method and target");
  std::string method = "dp";
  double target = 0.0;
  plan->add_option("-m,--method", method, "dp, llm_mq or hawq_v2")
      ->check(CLI::IsMember({"dp", "llm_mq", "hawq_v2"}))
      ->capture_default_str();
  plan->add_option("-t,--target", target, "Target average bitwidth")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate plans and write the comparison report");
  std::vector<std::string> plan_files;
  eval->add_option("plans", plan_files, "Plan files")->required();

  auto* decode = app.add_subcommand("decode", "Greedy generation with a plan");
  std::string decode_plan, prompt;
  std::size_t n_new = 0;
  bool n_new_set = false;
  decode->add_option("-p,--plan", decode_plan, "Plan file")->required();
  decode->add_option("--prompt", prompt, "Prompt text (default from config)");
  decode->add_option("-n,--n-new", n_new, "Tokens to generate (default from config)")
      ->each([&](const std::string&) { n_new_set = true; });

  auto* report = app.add_subcommand("report", "Run the full chain for every method and target");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = build_config(config_path, sets, work_dir);
    if (*init) {
      dpllm::cmd_init(cfg);
    } else if (*quantize) {
      std::cout << dpllm::hex64(dpllm::cmd_quantize(cfg)) << '\n';
    } else if (*profile) {
      dpllm::cmd_profile(cfg);
    } else if (*plan) {
      std::cout << dpllm::cmd_plan(cfg, method, target).path.string() << '\n';
    } else if (*eval) {
      std::vector<std::filesystem::path> paths(plan_files.begin(), plan_files.end());
      dpllm::cmd_eval(cfg, paths);
      std::cout << (cfg.reports_path() / "report.csv").string() << '\n';
    } else if (*decode) {
      const auto out = dpllm::cmd_decode(cfg, decode_plan, prompt.empty() ? cfg.prompt : prompt,
                                         n_new_set ? n_new : cfg.n_new);
      std::cout << out.text << '\n';
      std::cerr << "mean effective bits " << out.result.trace.mean_effective_bits() << " over "
                << out.result.trace.steps.size() << " steps\n";
    } else if (*report) {
      dpllm::cmd_report(cfg);
      std::cout << (cfg.reports_path() / "report.csv").string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return dpllm::exit_code_for(e);
  }
  return 0;
}
