#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"

using namespace fedsyn;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / "fedsyn_test_io" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

bool has_temp_files(const fs::path& dir) {
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().filename().string().find(".tmp.") != std::string::npos) return true;
    return false;
}

} // namespace

TEST_CASE("container round trip preserves doubles bitwise") {
    Container c;
    c.kind = "probe";
    c.meta = {{"note", "x"}, {"n", 3}};
    c.arrays.emplace("a", Tensor<double>({2, 2}, std::vector<double>{1.0, -0.0, 1e-310, std::acos(-1.0)}));
    c.arrays.emplace("b", Tensor<double>::vector({5.5}));
    const Container d = decode_container(encode_container(c), "mem");
    CHECK(d.kind == "probe");
    CHECK(d.meta == c.meta);
    REQUIRE(d.arrays.size() == 2);
    CHECK(d.arrays.at("a") == c.arrays.at("a"));
    CHECK(std::signbit(d.arrays.at("a")[1]));
    CHECK(d.arrays.at("b") == c.arrays.at("b"));
}

TEST_CASE("container decoding rejects damaged input") {
    Container c;
    c.kind = "probe";
    c.arrays.emplace("a", Tensor<double>::vector({1.0, 2.0, 3.0}));
    const std::string good = encode_container(c);
    CHECK_THROWS_AS(decode_container("short", "m"), IoError);
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_container(bad_magic, "m"), IoError);
    CHECK_THROWS_AS(decode_container(good.substr(0, good.size() - 4), "m"), IoError);
    CHECK_THROWS_AS(decode_container(good.substr(0, 20), "m"), IoError);
    std::string bad_header = good;
    bad_header[16] = '!';
    CHECK_THROWS_AS(decode_container(bad_header, "m"), IoError);
}

TEST_CASE("checkpoint round trip and kind checks") {
    const fs::path dir = fresh_dir("ckpt");
    const Mlp m(MlpSpec{{3, 4, 2}});
    Checkpoint ck{m.spec(), m.init(Rng(1)), {{"seed", 4}}, std::nullopt};
    save_checkpoint(dir / "a.fss", ck);
    Checkpoint back = load_checkpoint(dir / "a.fss");
    CHECK(back.spec.layers == ck.spec.layers);
    CHECK(back.weights == ck.weights);
    CHECK(back.meta.at("seed") == 4);
    CHECK(!back.previous_update);
    Rng rng(2);
    ck.previous_update = testing::gaussian_vector(ck.weights.size(), rng);
    save_checkpoint(dir / "b.fss", ck);
    CHECK(load_checkpoint(dir / "b.fss").previous_update == ck.previous_update);
    CHECK_THROWS_AS(load_synthetic(dir / "a.fss"), IoError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.fss"), IoError);
    CHECK(!has_temp_files(dir));
}

TEST_CASE("checkpoint with the wrong weight count is rejected") {
    const fs::path dir = fresh_dir("ckpt-bad");
    Container c;
    c.kind = "checkpoint";
    c.meta["layers"] = std::vector<std::size_t>{3, 2};
    c.arrays.emplace("weights", Tensor<double>::vector({1.0, 2.0}));
    write_container(dir / "bad.fss", c);
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.fss"), IoError);
}

TEST_CASE("synthetic set round trip") {
    const fs::path dir = fresh_dir("syn");
    const SyntheticDataset syn = init_synthetic(3, 2, 4, 0.07, Rng(3));
    save_synthetic(dir / "s.fss", syn, {{"seed", 1}});
    const SyntheticDataset back = load_synthetic(dir / "s.fss");
    CHECK(back.data.features == syn.data.features);
    CHECK(back.data.labels == syn.data.labels);
    CHECK(back.alpha == syn.alpha);
    CHECK(back.ipc == 2);
}

TEST_CASE("trajectory round trip keeps round numbers") {
    const fs::path dir = fresh_dir("traj");
    TrajectoryBuffer t;
    Rng rng(4);
    for (std::size_t r : {0, 1, 2, 5}) t.append(r, testing::gaussian_vector(7, rng));
    save_trajectory(dir / "t.fss", t, {{"cell", "x"}});
    json meta;
    const TrajectoryBuffer back = load_trajectory(dir / "t.fss", &meta);
    CHECK(back.rounds() == t.rounds());
    CHECK(back.snapshots() == t.snapshots());
    CHECK(meta.at("cell") == "x");
}

TEST_CASE("atomic writes replace files whole") {
    const fs::path dir = fresh_dir("atomic");
    atomic_write(dir / "f.txt", "first");
    atomic_write(dir / "f.txt", "second");
    CHECK(read_text(dir / "f.txt") == "second");
    atomic_write(dir / "nested" / "g.txt", "x");
    CHECK(read_text(dir / "nested" / "g.txt") == "x");
    CHECK(!has_temp_files(dir));
    CHECK_THROWS_AS(read_text(dir / "nope"), IoError);
}
