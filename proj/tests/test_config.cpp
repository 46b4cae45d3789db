#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "deq/config.hpp"
#include "deq/errors.hpp"

using namespace deq;

TEST_CASE("flat config parsing") {
  const auto kv = parse_flat_toml(
      "# training run\n"
      "[train]\n"
      "epochs = 50\n"
      "  lr_w=0.002   # endmembers\n"
      "\n"
      "solver = \"picard\"\n");
  CHECK(kv.size() == 3);
  CHECK(kv.at("epochs") == "50");
  CHECK(kv.at("lr_w") == "0.002");
  CHECK(kv.at("solver") == "picard");
  CHECK_THROWS_AS(parse_flat_toml("a = 1\na = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_flat_toml("just words\n"), ConfigError);
}

TEST_CASE("config values land in the right fields") {
  TrainConfig cfg;
  apply_config(cfg, {{"epochs", "7"},
                     {"lr_w", "0.002"},
                     {"lr_theta", "0.02"},
                     {"wd_w", "0"},
                     {"wd_theta", "0.001"},
                     {"alpha", "10"},
                     {"gamma", "1.2"},
                     {"eta", "0.05"},
                     {"lambda0", "0.1"},
                     {"hidden", "16"},
                     {"attention_ratio", "2"},
                     {"seed", "99"},
                     {"k_max", "30"},
                     {"tol", "1e-5"},
                     {"anderson_memory", "3"},
                     {"anderson_ridge", "1e-6"},
                     {"damping", "0.5"},
                     {"solver", "picard"},
                     {"t_max", "20"},
                     {"tol_b", "1e-6"},
                     {"on_divergence", "truncate"}});
  CHECK(cfg.epochs == 7);
  CHECK(cfg.lr_endmembers == 0.002);
  CHECK(cfg.lr_operator == 0.02);
  CHECK(cfg.decay_endmembers == 0.0);
  CHECK(cfg.decay_operator == 0.001);
  CHECK(cfg.alpha == 10.0);
  CHECK(cfg.gamma == 1.2);
  CHECK(cfg.eta == 0.05);
  CHECK(cfg.lambda0 == 0.1);
  CHECK(cfg.hidden == 16);
  CHECK(cfg.attention_ratio == 2);
  CHECK(cfg.seed == 99);
  CHECK(cfg.solver.k_max == 30);
  CHECK(cfg.solver.tol == 1e-5);
  CHECK(cfg.solver.anderson_memory == 3);
  CHECK(cfg.solver.anderson_ridge == 1e-6);
  CHECK(cfg.solver.damping == 0.5);
  CHECK(cfg.solver_mode == SolverMode::kPicard);
  CHECK(cfg.backward.t_max == 20);
  CHECK(cfg.backward.tol == 1e-6);
  CHECK(cfg.backward.on_divergence == DivergencePolicy::kTruncate);

  CHECK_THROWS_AS(apply_config_value(cfg, "learning_rate", "0.1"), ConfigError);
  CHECK_THROWS_AS(apply_config_value(cfg, "eta", "fast"), ConfigError);
  CHECK_THROWS_AS(apply_config_value(cfg, "epochs", "-3"), ConfigError);
  CHECK_THROWS_AS(apply_config_value(cfg, "solver", "newton"), ConfigError);
}

TEST_CASE("config file overrides a preset and is validated") {
  const auto path = std::filesystem::temp_directory_path() / "deq_unmix_test_config.toml";
  std::ofstream(path) << "epochs = 3\ngamma = 0.5\n";
  const TrainConfig cfg = load_train_config(path, TrainConfig::samson());
  CHECK(cfg.epochs == 3);
  CHECK(cfg.gamma == 0.5);
  CHECK(cfg.lambda0 == 0.1);
  std::ofstream(path, std::ios::trunc) << "epochs = 0\n";
  CHECK_THROWS_AS(load_train_config(path), ConfigError);
  std::filesystem::remove(path);
  CHECK_THROWS(load_train_config(path));
}

TEST_CASE("json round trip") {
  TrainConfig cfg = TrainConfig::synthetic(15.0);
  cfg.seed = 12345678901234ULL;
  cfg.solver.tol = 1.0 / 3.0;
  cfg.backward.on_divergence = DivergencePolicy::kTruncate;
  const TrainConfig back = train_config_from_json(train_config_json(cfg));
  CHECK(train_config_json(back) == train_config_json(cfg));
  CHECK(back.seed == cfg.seed);
  CHECK(back.solver.tol == cfg.solver.tol);
  CHECK(back.backward.on_divergence == DivergencePolicy::kTruncate);
  CHECK_THROWS_AS(train_config_from_json("{\"epochs\": 3}"), SchemaError);
}
