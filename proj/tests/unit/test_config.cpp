#include <doctest.h>

#include <cstdlib>
#include <string>

#include "arwb/config.hpp"
#include "arwb/errors.hpp"

using namespace arwb;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults and canonical form") {
  RunConfig d;
  RunConfig p = parse_config("");
  CHECK(p.canonical() == d.canonical());
  CHECK(p.hash() == d.hash());
  CHECK(d.attacks.size() == 6);
  CHECK(d.defenses.size() == 7);
}

TEST_CASE("values parse") {
  RunConfig c = parse_config(R"(seed = 11
[data]
sign_test = 20   # trailing comment
[attack]
names = fgsm, AutoPGD
epsilon = 4/255
basis = pixel
; full-line comment
[defense]
names = none, medianblur, diffpir
bits = 2
inner = autopgd
[bench]
out = elsewhere
)");
  CHECK(c.seed == 11);
  CHECK(c.sign_test == 20);
  CHECK(c.attacks == std::vector<AttackKind>{AttackKind::Fgsm, AttackKind::AutoPgd});
  CHECK(c.epsilon == doctest::Approx(4.0 / 255));
  CHECK(c.basis == SimbaBasis::Pixel);
  CHECK(c.defenses.size() == 3);
  CHECK(c.bits == 2);
  CHECK(c.inner == InnerAttack::AutoPgd);
  CHECK(c.out == "elsewhere");

  auto atk = c.attack_configs();
  REQUIRE(atk.size() == 2);
  CHECK(atk[0].budget.epsilon == doctest::Approx(4.0 / 255));
  auto def = c.defense_configs();
  CHECK(def[1].kind == DefenseKind::MedianBlur);
  CHECK(def[0].bits == 2);
}

TEST_CASE("errors name the offending key") {
  CHECK(error_of("[data]\nsign_tset = 3\n").find("data.sign_tset") != std::string::npos);
  CHECK(error_of("[nope]\n").find("nope") != std::string::npos);
  CHECK(error_of("[data]\nsign_test = 3\nsign_test = 4\n").find("duplicate") != std::string::npos);
  CHECK(error_of("[data]\nsign_test = -3\n").find("data.sign_test") != std::string::npos);
  CHECK(error_of("[attack]\nepsilon = 1/0\n").find("attack.epsilon") != std::string::npos);
  CHECK(error_of("[defense]\nnames = none, jpeg\n").find("jpeg") != std::string::npos);
  CHECK(error_of("[attack]\nbasis = wavelet\n").find("attack.basis") != std::string::npos);
  CHECK(error_of("junk line\n") != "");
  CHECK(error_of("[defense]\nkernel = 4\n") != "");
}

TEST_CASE("hash ignores layout and comments but not values") {
  RunConfig a = parse_config("seed = 3\n[data]\nsign_test = 10\n");
  RunConfig b = parse_config("# header\n\nseed=3   ; c\n\n[data]\n  sign_test   =   10  # n\n");
  RunConfig c = parse_config("seed = 4\n[data]\nsign_test = 10\n");
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
  CHECK(a.hash().size() == 16);
}

TEST_CASE("ARW_SEED override") {
  RunConfig c;
  setenv("ARW_SEED", "123", 1);
  apply_env_overrides(c);
  CHECK(c.seed == 123);
  setenv("ARW_SEED", "12x", 1);
  CHECK_THROWS_AS(apply_env_overrides(c), ConfigError);
  unsetenv("ARW_SEED");
  c.seed = 5;
  apply_env_overrides(c);
  CHECK(c.seed == 5);
}

TEST_CASE("missing config file") {
  CHECK_THROWS_AS(load_config("/nonexistent/arwb.cfg"), ConfigError);
}
