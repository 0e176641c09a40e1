#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "helpers.hpp"
#include "pmdm/io.hpp"
#include "pmdm/params.hpp"

using namespace pmdm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("pmdm_io_test_" + std::to_string(counter++) + "_" +
                                            std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_SUITE_BEGIN("io");

TEST_CASE("pimg round-trips bitwise") {
    TempDir tmp;
    Rng rng(1);
    ImageGrid img(5, 7, 2.5f);
    for (auto& v : img.values) v = static_cast<float>(rng.uniform());
    save_pimg(tmp.file("a.pimg"), img);
    const ImageGrid back = load_pimg(tmp.file("a.pimg"));
    CHECK(back.width == 5);
    CHECK(back.height == 7);
    CHECK(back.pixel_size_mm == 2.5f);
    CHECK(back.values == img.values);
}

TEST_CASE("psin round-trips bitwise including kind flag") {
    TempDir tmp;
    Sinogram s(6, 4, 3.0f, Sinogram::Kind::Counts);
    for (std::size_t i = 0; i < s.data.size(); ++i) s.data[i] = static_cast<float>(i);
    save_psin(tmp.file("a.psin"), s);
    const Sinogram back = load_psin(tmp.file("a.psin"));
    CHECK(back.n_bins == 6);
    CHECK(back.n_angles == 4);
    CHECK(back.bin_spacing_mm == 3.0f);
    CHECK(back.kind == Sinogram::Kind::Counts);
    CHECK(back.data == s.data);
}

TEST_CASE("bad magic is rejected") {
    TempDir tmp;
    write_text_file(tmp.file("junk.pimg"), "not an image at all");
    CHECK_THROWS_AS((void)load_pimg(tmp.file("junk.pimg")), std::runtime_error);
    CHECK_THROWS_AS((void)load_psin(tmp.file("junk.pimg")), std::runtime_error);
    CHECK_THROWS_AS((void)load_params(tmp.file("junk.pimg")), std::runtime_error);
}

TEST_CASE("weight files round-trip values, shapes, and optimizer state") {
    TempDir tmp;
    Rng rng(5);
    ParamStore P;
    Tensor w = Tensor::from_data({3, 2}, testutil::random_vec(rng, 6), true);
    P.add("layer.weight", std::move(w));
    P.add("layer.bias", Tensor::from_data({3}, testutil::random_vec(rng, 3), true));
    P.at("layer.weight").grad()[0] = 0.5f;
    adam_step(P, AdamConfig{});
    save_params(tmp.file("ckpt.pmdm"), P);

    ParamStore back = load_params(tmp.file("ckpt.pmdm"));
    CHECK(back.entries().size() == 2);
    CHECK(back.at("layer.weight").shape() == Shape{3, 2});
    CHECK(back.at("layer.weight").values() == P.at("layer.weight").values());
    CHECK(back.at("layer.bias").values() == P.at("layer.bias").values());
    CHECK(back.adam.step == 1);
    CHECK(back.adam.moments.at("layer.weight").m == P.adam.moments.at("layer.weight").m);
    CHECK(back.adam.moments.at("layer.weight").v == P.adam.moments.at("layer.weight").v);
}

TEST_CASE("pgm previews carry the P5 header") {
    TempDir tmp;
    std::vector<float> img(12, 0.5f);
    save_pgm(tmp.file("x.pgm"), img.data(), 3, 4, 0.0f, 1.0f);
    const std::string text = read_text_file(tmp.file("x.pgm"));
    CHECK(text.substr(0, 2) == "P5");
    CHECK(text.find("4 3") != std::string::npos);
}

TEST_CASE("pad_to_square centers and inverts exactly") {
    // 48x30 at target 64 puts the block at offsets (8, 17).
    std::vector<float> src(48 * 30);
    Rng rng(2);
    for (auto& v : src) v = static_cast<float>(rng.uniform());
    const auto padded = pad_to_square(src, 48, 30, 64);
    CHECK(padded.size() == 64u * 64u);
    CHECK(padded[8u * 64u + 17u] == src[0]);
    CHECK(padded[7u * 64u + 17u] == 0.0f);
    CHECK(padded[8u * 64u + 16u] == 0.0f);
    CHECK(crop_from_square(padded, 48, 30, 64) == src);

    // already-square input at target size is unchanged
    std::vector<float> sq(16, 1.0f);
    CHECK(pad_to_square(sq, 4, 4, 4) == sq);
    CHECK_THROWS_AS((void)pad_to_square(sq, 4, 4, 3), std::invalid_argument);
}

TEST_SUITE_END();
