#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "moelab/checkpoint.hpp"
#include "moelab/checksum.hpp"
#include "moelab/config.hpp"
#include "moelab/errors.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

const char* kSample = R"(
[run]
seed = 7
out = runs/x   # trailing comment
timing = true

[teacher]
d_model = 16
n_layers = 2
n_heads = 2
d_ff = 32
max_seq_len = 32
moe_layers = 1
n_experts = 4
k = 2

[distill]
method = sar
lambda = 0.25
M = 3
beta = 0.5
sar_kl_direction = reverse

[data]
tasks = copy,sort_bytes
n = 50

[analyze]
ks = 1,2,4
)";

LanguageModel small_teacher() {
    ModelConfig c;
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 16;
    c.max_seq_len = 16;
    c.moe = MoeSpec{4, 2, {1}};
    return LanguageModel(c, 11);
}

}  // namespace

TEST_CASE("config parses sections, comments and typed values") {
    const auto c = parse_config(kSample);
    CHECK(c.seed == 7);
    CHECK(c.out == "runs/x");
    CHECK(c.timing);
    CHECK(c.teacher.d_model == 16);
    REQUIRE(c.teacher.moe);
    CHECK(c.teacher.moe->n_experts == 4);
    CHECK(c.teacher.moe->layers == std::vector<std::size_t>{1});
    CHECK(c.distill.method == Method::Sar);
    CHECK(c.distill.lambda == 0.25);
    CHECK(c.distill.M == 3);
    CHECK(c.distill.sar_kl_direction == KlDirection::Reverse);
    CHECK(c.data.tasks == std::vector<Task>{Task::Copy, Task::SortBytes});
    CHECK(c.analyze.ks == std::vector<std::size_t>{1, 2, 4});
    CHECK(c.student.d_model == ModelConfig::desk_student().d_model);
}

TEST_CASE("canonical text round-trips and fixes the hash") {
    const auto c = parse_config(kSample);
    const auto text = to_ini(c);
    const auto again = parse_config(text);
    CHECK(to_ini(again) == text);
    CHECK(config_hash(again) == config_hash(c));
    CHECK(config_hash(c).size() == 16);
    auto changed = c;
    apply_override(changed, "distill.lambda=0.5");
    CHECK(config_hash(changed) != config_hash(c));
}

TEST_CASE("unknown keys, sections and bad values are rejected with their location") {
    try {
        parse_config("[run]\nseed = 1\nsede = 2\n", "cfg.ini");
        FAIL("accepted unknown key");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("cfg.ini:3") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config("[nosuch]\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[run]\nseed = -1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[distill]\nmethod = bogus\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[distill]\nlambda = 1.5\n").validate(), ConfigError);
    CHECK_THROWS_AS(parse_config("seed = 1\n"), ConfigError);
    RunConfig c;
    CHECK_THROWS_AS(apply_override(c, "distill.nokey=1"), ConfigError);
    CHECK_THROWS_AS(apply_override(c, "no-equals"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/moelab.ini"), IoError);
}

TEST_CASE("default config validates") { CHECK_NOTHROW(RunConfig{}.validate()); }

TEST_CASE("checkpoint round-trips every parameter bit-exactly") {
    const auto model = small_teacher();
    const auto bytes = serialize_checkpoint(model, "role = teacher\n");
    const auto back = deserialize_checkpoint(bytes);
    CHECK(back.metadata == "role = teacher\n");
    const auto a = model.parameters();
    const auto b = back.model.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].tensor.shape() == b[i].tensor.shape());
        CHECK(checksum(a[i].tensor.data()) == checksum(b[i].tensor.data()));
    }
    CHECK(serialize_checkpoint(back.model, back.metadata) == bytes);
}

TEST_CASE("save then load then save gives identical files") {
    const fs::path dir = fs::temp_directory_path() / "moelab_test_config_ckpt";
    fs::remove_all(dir);
    const auto p1 = (dir / "a.ckpt").string();
    const auto p2 = (dir / "b.ckpt").string();
    save_checkpoint(p1, small_teacher(), "m");
    const auto loaded = load_checkpoint(p1);
    save_checkpoint(p2, loaded.model, loaded.metadata);
    CHECK(read_file(p1) == read_file(p2));
    CHECK_FALSE(fs::exists(p1 + ".tmp"));
    fs::remove_all(dir);
}

TEST_CASE("corrupted or truncated checkpoints are refused") {
    const auto bytes = serialize_checkpoint(small_teacher(), "m");
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x01;
    CHECK_THROWS_AS(deserialize_checkpoint(flipped), IoError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), IoError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), IoError);
}

TEST_CASE("the output directory does not enter the config hash") {
    RunConfig a, b;
    b.out = "elsewhere";
    CHECK(config_hash(a) == config_hash(b));
    b.seed = 99;
    CHECK(config_hash(a) != config_hash(b));
}
