#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "mma/checkpoint.hpp"
#include "mma/commands.hpp"
#include "mma/errors.hpp"

using namespace mma;
namespace fs = std::filesystem;

namespace {

RunConfig small_run(const std::string& name) {
  RunConfig cfg = cli::tiny_config(RunConfig{});
  cfg.text_train = 40;
  cfg.image_train = 40;
  cfg.text_eval = 12;
  cfg.image_eval = 12;
  cfg.train.batch_size = 8;
  cfg.train.epochs = 2;
  cfg.eval_every = 1;
  cfg.out_dir = (fs::temp_directory_path() / "mma_unit_cli" / name).string();
  fs::remove_all(cfg.out_dir);
  cfg.finalize();
  return cfg;
}

std::vector<std::string> lines_of(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("train writes schema-valid metrics and a checkpoint; eval reproduces the final record") {
  const RunConfig cfg = small_run("train");
  std::ostringstream out, err;
  REQUIRE(cli::cmd_train(cfg, out, err) == 0);
  const auto lines = lines_of(cfg.metrics_path());
  REQUIRE(lines.size() == 2);
  for (const auto& l : lines) CHECK_FALSE(check_metrics_line(l).has_value());
  const MetricsRecord last = MetricsRecord::from_json(lines.back());
  CHECK(last.epoch == 2);
  CHECK(last.step == 20);
  CHECK(last.split == "eval");

  const MetricsRecord again = cli::cmd_eval(cfg, cfg.checkpoint_path(), "eval");
  CHECK(again.same_result(last));
  const MetricsRecord twice = cli::cmd_eval(cfg, cfg.checkpoint_path(), "eval");
  CHECK(twice.same_result(again));
  const MetricsRecord train_split = cli::cmd_eval(cfg, cfg.checkpoint_path(), "train");
  CHECK(train_split.split == "train");
  CHECK_THROWS_AS(cli::cmd_eval(cfg, cfg.checkpoint_path(), "test"), ConfigError);
  CHECK(read_checkpoint_meta(cfg.checkpoint_path()).config_text == cfg.to_text());
}

TEST_CASE("zero epochs still evaluates and saves") {
  RunConfig cfg = small_run("zero");
  cfg.train.epochs = 0;
  std::ostringstream out, err;
  REQUIRE(cli::cmd_train(cfg, out, err) == 0);
  const auto lines = lines_of(cfg.metrics_path());
  REQUIRE(lines.size() == 1);
  const MetricsRecord r = MetricsRecord::from_json(lines[0]);
  CHECK(r.step == 0);
  CHECK(r.lr == cfg.train.lr_max);
  CHECK(fs::exists(cfg.checkpoint_path()));
}

TEST_CASE("inspect-routing on an untrained checkpoint shows an even split") {
  RunConfig cfg = small_run("routing");
  cfg.train.epochs = 0;
  std::ostringstream out, err;
  REQUIRE(cli::cmd_train(cfg, out, err) == 0);
  std::ostringstream table;
  CHECK(cli::cmd_inspect_routing(cfg.checkpoint_path(), table) == 0);
  CHECK(table.str().find("[0.5, 0.5]") != std::string::npos);
  CHECK(table.str().find("all routing pairs sum to 1") != std::string::npos);
}

TEST_CASE("merge accepts one modality and passes its audit") {
  const RunConfig cfg = small_run("merge");
  std::ostringstream out, err;
  REQUIRE(cli::cmd_train(cfg, out, err) == 0);
  const std::string merged = (fs::path(cfg.out_dir) / "merged.ckpt").string();
  std::ostringstream mout, merr;
  CHECK(cli::cmd_merge(cfg.checkpoint_path(), "both", merged, mout, merr) != 0);
  CHECK(merr.str().find("usage") != std::string::npos);
  CHECK_FALSE(fs::exists(merged));
  for (const char* m : {"text", "image"}) {
    std::ostringstream o, e;
    CHECK(cli::cmd_merge(cfg.checkpoint_path(), m, merged, o, e) == 0);
    CHECK(o.str().find("PASS") != std::string::npos);
  }
}

TEST_CASE("generate checks its inputs") {
  const RunConfig cfg = small_run("generate");
  std::ostringstream out;
  CHECK(cli::cmd_generate(cfg, "", "text", "3+4=?", "", out) == 0);
  CHECK(cli::cmd_generate(cfg, "", "image", "most?", "0123/4567/0123/4567", out) == 0);
  CHECK_THROWS_AS(cli::cmd_generate(cfg, "", "image", "most?", "", out), ModalityMismatch);
  CHECK_THROWS_AS(cli::cmd_generate(cfg, "", "text", "3+4=?", "0123/4567/0123/4567", out), ModalityMismatch);
  CHECK_THROWS_AS(cli::cmd_generate(cfg, "", "image", "most?", "0123/4567/0123", out), DomainError);
  CHECK_THROWS_AS(cli::cmd_generate(cfg, "", "image", "most?", "0123/4567/0123/4569", out), DomainError);
  CHECK_THROWS_AS(cli::cmd_generate(cfg, "", "text", "3+4=%", "", out), UnknownSymbol);
}

TEST_CASE("grad-check passes and its negative control names the broken tensors") {
  const RunConfig cfg = small_run("gradcheck");
  std::ostringstream out;
  CHECK(cli::cmd_gradcheck(cfg, out) == 0);
  CHECK(out.str().find("PASS") != std::string::npos);

  debug::set_backward_fault("silu", 1.5);
  std::ostringstream bad;
  const int code = cli::cmd_gradcheck(cfg, bad);
  debug::clear_backward_faults();
  CHECK(code != 0);
  CHECK(bad.str().find("FAIL") != std::string::npos);
  CHECK(bad.str().find("neck.") != std::string::npos);
}

TEST_CASE("parameter groups") {
  CHECK(cli::parameter_group("modality_embedding") == "modality_embedding");
  CHECK(cli::parameter_group("neck.w_up") == "visual_neck");
  CHECK(cli::parameter_group("llm.blocks.1.mm_adapter.router.bias") == "router");
  CHECK(cli::parameter_group("llm.blocks.1.mm_adapter.up2") == "mm_adapter");
  CHECK(cli::parameter_group("vit.blocks.3.adapter.down") == "encoder_adapter");
}

TEST_CASE("gen-data writes four record files") {
  const RunConfig cfg = small_run("gendata");
  std::ostringstream out;
  CHECK(cli::cmd_gen_data(cfg, out) == 0);
  for (const char* f : {"text_train.tsv", "image_train.tsv", "text_eval.tsv", "image_eval.tsv"})
    CHECK(lines_of((fs::path(cfg.out_dir) / f).string()).size() == (std::string(f).find("train") != std::string::npos ? 40u : 12u));
}

}
