// actcomp: train with pluggable activation compression, verify the theory
// checks, and report memory breakdowns.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "actcomp/train.hpp"

namespace {

std::vector<std::size_t> parse_batches(const std::string& spec) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos < spec.size()) {
    std::size_t comma = spec.find(',', pos);
    std::string tok = spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!tok.empty()) out.push_back(static_cast<std::size_t>(std::stoull(tok)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"activation-compression training and verification harness"};
  app.require_subcommand(1);

  std::string config_path;
  std::string check = "all";
  std::string batches = "8,16,24,32";

  CLI::App* train = app.add_subcommand("train", "run the training loop");
  train->add_option("--config", config_path, "config JSON path")->required();

  CLI::App* verify = app.add_subcommand("verify", "run a theory check");
  verify->add_option("--config", config_path, "config JSON path")->required();
  verify->add_option("--check", check, "check name or 'all'");

  CLI::App* mem = app.add_subcommand("report-memory", "analytic memory breakdown sweep");
  mem->add_option("--config", config_path, "config JSON path")->required();
  mem->add_option("--batches", batches, "comma-separated batch sizes");

  CLI::App* gen = app.add_subcommand("gen-data", "emit the synthetic dataset");
  gen->add_option("--config", config_path, "config JSON path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    actcomp::RunConfig cfg = actcomp::load_config(config_path);
    if (train->parsed()) {
      actcomp::run_train_cmd(cfg);
      std::cout << "wrote " << cfg.output_dir << "/loss.csv, memory.json, checkpoint.bin\n";
      return 0;
    }
    if (verify->parsed()) {
      bool ok = actcomp::run_verify_cmd(cfg, check, std::cout);
      return ok ? 0 : 2;
    }
    if (mem->parsed()) {
      actcomp::run_report_memory_cmd(cfg, parse_batches(batches));
      std::cout << "wrote " << cfg.output_dir << "/memory_sweep.csv, memory_sweep.json\n";
      return 0;
    }
    if (gen->parsed()) {
      actcomp::run_gen_data_cmd(cfg);
      std::cout << "wrote " << cfg.output_dir << "/tokens.csv\n";
      return 0;
    }
  } catch (const actcomp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const actcomp::ContractViolation& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return 1;
  } catch (const actcomp::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << " (residual " << e.residual << ")\n";
    return 3;
  }
  return 0;
}
