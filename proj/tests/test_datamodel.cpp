#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "clims/config.hpp"
#include "testutil.hpp"

using namespace clims;

TEST_CASE("prompt book: paper background sets") {
  const auto book = build_prompt_book({"train"}, default_background_map(), "a photo of {}");
  CHECK(book.object_prompts[0] == "a photo of train");
  REQUIRE(book.background_prompts[0].size() == 3);
  CHECK(book.background_prompts[0][0] == "a photo of railroad");
  CHECK(book.background_prompts[0][1] == "a photo of railway");
  CHECK(book.background_prompts[0][2] == "a photo of tree");

  const auto boat = build_prompt_book({"boat"}, default_background_map(), "a photo of {}");
  REQUIRE(boat.background_prompts[0].size() == 3);
  CHECK(boat.background_prompts[0][0] == "a photo of river");
  CHECK(boat.background_prompts[0][1] == "a photo of sea");
  CHECK(boat.background_prompts[0][2] == "a photo of lake");
}

TEST_CASE("prompt book: class without backgrounds gets an empty list") {
  const auto book = build_prompt_book({"cat"}, {}, "a photo of {}");
  CHECK(book.object_prompts[0] == "a photo of cat");
  CHECK(book.background_prompts[0].empty());
  CHECK(book.background_count(0) == 0);
}

TEST_CASE("prompt book: validation errors") {
  CHECK_THROWS_AS(build_prompt_book({"cat", "cat"}, {}, "a photo of {}"), ValidationError);
  CHECK_THROWS_AS(build_prompt_book({"cat"}, {}, "a photo of"), ValidationError);
  CHECK_THROWS_AS(build_prompt_book({"cat"}, {}, "{} and {}"), ValidationError);
  CHECK_THROWS_AS(build_prompt_book({}, {}, "a photo of {}"), ValidationError);
}

TEST_CASE("prompt book: determinism and order preservation") {
  const std::vector<std::string> names = {"boat", "train", "cat"};
  const auto a = build_prompt_book(names, default_background_map());
  const auto b = build_prompt_book(names, default_background_map());
  for (int k = 0; k < a.class_count(); ++k) {
    CHECK(a.object_prompts[k] == b.object_prompts[k]);
    CHECK(a.class_names[k] == names[k]);
  }
  // class k's prompts depend only on class_names[k] and the map
  const auto solo = build_prompt_book({"train"}, default_background_map());
  CHECK(solo.object_prompts[0] == a.object_prompts[1]);
  CHECK(solo.background_prompts[0] == a.background_prompts[1]);
}

TEST_CASE("prompt book: file round trip") {
  const auto dir = testutil::scratch_dir("promptbook");
  const auto book = build_prompt_book({"toy-train", "toy-boat"}, synthetic_background_map());
  save_prompt_book(book, dir + "/book.json");
  const auto loaded = load_prompt_book(dir + "/book.json");
  CHECK(loaded.template_text == book.template_text);
  CHECK(loaded.class_names == book.class_names);
  CHECK(loaded.object_prompts == book.object_prompts);
  CHECK(loaded.background_prompts == book.background_prompts);
}

TEST_CASE("config: empty file gives the published defaults") {
  const TrainConfig cfg = parse_config("");
  CHECK(cfg.learning_rate == doctest::Approx(0.00025));
  CHECK(cfg.weight_decay == doctest::Approx(0.0001));
  CHECK(cfg.epochs == 10);
  CHECK(cfg.batch_size == 16);
  CHECK(cfg.loss_weights.alpha == doctest::Approx(10.0));
  CHECK(cfg.loss_weights.beta == doctest::Approx(25.0));
  CHECK(cfg.loss_weights.gamma == doctest::Approx(29.5));
  CHECK(cfg.loss_weights.delta == doctest::Approx(1.15));
  CHECK(cfg.similarity_clamp_epsilon == doctest::Approx(1e-4));
}

TEST_CASE("config: overrides keep remaining defaults") {
  const TrainConfig cfg = parse_config(R"({"epochs": 2, "seed": 7})");
  CHECK(cfg.epochs == 2);
  CHECK(cfg.seed == 7);
  CHECK(cfg.learning_rate == doctest::Approx(0.00025));
  CHECK(cfg.batch_size == 16);
}

TEST_CASE("config: validation failures name the problem") {
  CHECK_THROWS_WITH_AS(parse_config(R"({"learning_rate": -1})"),
                       doctest::Contains("learning_rate"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config(R"({"momentum": 0.9})"), doctest::Contains("momentum"),
                       ValidationError);
  CHECK_THROWS_AS(parse_config(R"({"similarity_clamp_epsilon": 0.7})"), ValidationError);
  CHECK_THROWS_AS(parse_config(R"({"epochs": 0})"), ValidationError);
  CHECK_THROWS_AS(parse_config(R"({"alpha": -2})"), ValidationError);
}

TEST_CASE("config: save/load round trip is identical") {
  TrainConfig cfg;
  cfg.learning_rate = 0.00037;
  cfg.epochs = 3;
  cfg.seed = 123456789;
  cfg.loss_weights.gamma = 17.25;
  const auto dir = testutil::scratch_dir("config");
  save_config(cfg, dir + "/c.json");
  const TrainConfig loaded = load_config(dir + "/c.json");
  CHECK(serialize_config(loaded) == serialize_config(cfg));
  CHECK(config_hash(loaded) == config_hash(cfg));
  CHECK(loaded.learning_rate == cfg.learning_rate);
  CHECK(loaded.seed == cfg.seed);
}

TEST_CASE("config: load_config rejects a missing file") {
  CHECK_THROWS_AS(load_config("/nonexistent/nowhere.json"), ValidationError);
}

TEST_CASE("template instantiation") {
  CHECK(instantiate_template("a photo of {}", "train") == "a photo of train");
  CHECK(instantiate_template("{} up close", "boat") == "boat up close");
  CHECK_THROWS_AS(instantiate_template("no placeholder", "x"), ValidationError);
}
