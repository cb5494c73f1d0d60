#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mma/commands.hpp"
#include "mma/errors.hpp"

using namespace mma;

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-modality adapters on a frozen mini vision-language model"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  app.add_option("--config", config_path, "key = value run configuration");
  app.add_option("--seed", seed, "override the config seed");
  app.add_option("--out", out_dir, "override the output directory");

  auto* train = app.add_subcommand("train", "train the adapters, write metrics and a checkpoint");

  std::string checkpoint, split = "eval";
  auto* eval = app.add_subcommand("eval", "greedy exact-match evaluation of a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "eval"}));

  std::string modality = "text", instruction, grid;
  auto* generate = app.add_subcommand("generate", "top-p sampling for one instruction");
  generate->add_option("--checkpoint", checkpoint);
  generate->add_option("--modality", modality)->check(CLI::IsMember({"text", "image"}));
  generate->add_option("--instruction", instruction)->required();
  generate->add_option("--grid", grid, "rows of color digits separated by '/'");

  auto* routing = app.add_subcommand("inspect-routing", "per-layer routing weights of a checkpoint");
  routing->add_option("--checkpoint", checkpoint)->required();

  auto* gradcheck = app.add_subcommand("grad-check", "finite-difference check of all adapter gradients");

  std::string merged_path;
  auto* merge = app.add_subcommand("merge", "fold the adapters for one modality into dense maps");
  merge->add_option("--checkpoint", checkpoint)->required();
  merge->add_option("--modality", modality)->required();
  merge->add_option("--output", merged_path)->required();

  auto* gen_data = app.add_subcommand("gen-data", "write the train/eval datasets as text records");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto effective = [&] {
      RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
      if (seed) cfg.seed = *seed;
      if (out_dir) cfg.out_dir = *out_dir;
      cfg.finalize();
      std::cerr << "# effective config\n" << cfg.to_text();
      return cfg;
    };
    if (*train) return cli::cmd_train(effective(), std::cout, std::cerr);
    if (*eval) {
      std::cout << cli::cmd_eval(effective(), checkpoint, split).to_json() << '\n';
      return 0;
    }
    if (*generate) return cli::cmd_generate(effective(), checkpoint, modality, instruction, grid, std::cout);
    if (*routing) return cli::cmd_inspect_routing(checkpoint, std::cout);
    if (*gradcheck) return cli::cmd_gradcheck(effective(), std::cout);
    if (*merge) return cli::cmd_merge(checkpoint, modality, merged_path, std::cout, std::cerr);
    if (*gen_data) return cli::cmd_gen_data(effective(), std::cout);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
