#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "sphere/checkpoint.hpp"
#include "sphere/network.hpp"
#include "sphere/rng.hpp"

namespace ag = sphere::ag;
using namespace sphere;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 2;
    cfg.hidden_size = 16;
    cfg.n_blocks = 2;
    cfg.n_heads = 2;
    cfg.mixer_depth = 1;
    cfg.latent_d = 4;
    cfg.n_classes = 3;
    return cfg;
}

ag::Var<float> random_images(const ModelConfig& cfg, int64_t batch, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(static_cast<size_t>(batch * cfg.image_size * cfg.image_size * cfg.channels));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return ag::Var<float>::leaf({batch, cfg.image_size, cfg.image_size, cfg.channels}, std::move(v));
}

double flat_norm(const std::vector<float>& v, int64_t row, int64_t len) {
    double acc = 0.0;
    for (int64_t i = 0; i < len; ++i) {
        const double x = v[static_cast<size_t>(row * len + i)];
        acc += x * x;
    }
    return std::sqrt(acc);
}

}  // namespace

TEST_SUITE_BEGIN("network");

TEST_CASE("latent shape rule matches the scaled table row") {
    ModelConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 2;
    cfg.latent_d = 8;
    cfg.hidden_size = 32;
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.mixer_depth = 1;
    cfg.n_classes = 3;
    auto model = Model<float>::init(cfg, 1);
    ag::NoGradGuard ng;
    auto z = model.encode(random_images(cfg, 2, 7), {0, 1});
    CHECK(z.shape() == Shape{2, 16, 16, 8});
    CHECK(cfg.latent_len() == 2048);
    CHECK(cfg.compression_ratio() == doctest::Approx(32.0 * 32.0 * 3.0 / 2048.0));
}

TEST_CASE("shape algebra across the config matrix") {
    ag::NoGradGuard ng;
    struct Row {
        int64_t image, patch;
    };
    for (const auto [image, patch] : {Row{16, 2}, Row{24, 2}, Row{32, 2}, Row{32, 4}}) {
        for (const int64_t d : {4, 8, 16}) {
            ModelConfig cfg;
            cfg.image_size = image;
            cfg.patch_size = patch;
            cfg.latent_d = d;
            cfg.hidden_size = 16;
            cfg.n_heads = 2;
            cfg.n_blocks = 1;
            cfg.mixer_depth = 1;
            cfg.n_classes = 2;
            auto model = Model<float>::init(cfg, 3);
            auto z = model.encode(random_images(cfg, 2, 11), {0, 1});
            const auto ls = cfg.latent_shape();
            REQUIRE(z.shape() == Shape{2, ls.h, ls.w, ls.d});
            auto x = model.decode(z, {0, 1});
            REQUIRE(x.shape() == Shape{2, image, image, 3});
            // decode also accepts the flattened form
            auto x2 = model.decode(ag::reshape(z, {2, cfg.latent_len()}), {0, 1});
            REQUIRE(x2.shape() == x.shape());
        }
    }
}

TEST_CASE("encoder output norm is bounded by sqrt(L)") {
    const auto cfg = tiny_config();
    auto model = Model<float>::init(cfg, 5);
    // push the gain up so the bound actually binds
    auto& gain = model.params().at("enc.tail.gain").val_mut();
    for (auto& g : gain) g = 3.0f;
    ag::NoGradGuard ng;
    const double limit = std::sqrt(static_cast<double>(cfg.latent_len()));
    for (uint64_t seed = 0; seed < 8; ++seed) {
        auto z = model.encode(random_images(cfg, 4, 100 + seed), {});
        for (int64_t b = 0; b < 4; ++b)
            CHECK(flat_norm(z.val(), b, cfg.latent_len()) <= limit + 1e-4);
    }
}

TEST_CASE("encode and decode are deterministic given parameters") {
    const auto cfg = tiny_config();
    auto model = Model<float>::init(cfg, 5);
    ag::NoGradGuard ng;
    auto imgs = random_images(cfg, 2, 42);
    auto z1 = model.encode(imgs, {0, 2});
    auto z2 = model.encode(imgs, {0, 2});
    CHECK(z1.val() == z2.val());
    auto x1 = model.decode(z1, {0, 2});
    auto x2 = model.decode(z2, {0, 2});
    CHECK(x1.val() == x2.val());
}

TEST_CASE("adaLN-zero makes blocks exact identities at init") {
    const auto cfg = tiny_config();
    auto model = Model<float>::init(cfg, 9);
    ag::NoGradGuard ng;
    Rng rng(13);
    std::vector<float> xv(static_cast<size_t>(2 * cfg.tokens() * cfg.hidden_size));
    for (auto& v : xv) v = static_cast<float>(rng.normal());
    auto x = ag::Var<float>::leaf({2, cfg.tokens(), cfg.hidden_size}, xv);
    auto cond = model.cond_vector("enc", {0, 1}, 2);
    auto y = model.run_block(x, cond, "enc.block0");
    for (size_t i = 0; i < xv.size(); ++i) CHECK(y.val()[i] == xv[i]);
}

TEST_CASE("class id does not influence outputs until gates open") {
    const auto cfg = tiny_config();
    auto model = Model<float>::init(cfg, 21);
    ag::NoGradGuard ng;
    auto imgs = random_images(cfg, 2, 77);
    auto za = model.encode(imgs, {0, 0});
    auto zb = model.encode(imgs, {2, 2});
    CHECK(za.val() == zb.val());  // zero-init gates ignore the condition

    // open the gates: now class identity must matter
    for (const char* name : {"enc.block0.ada.w", "enc.block1.ada.w"}) {
        auto& w = model.params().at(name).val_mut();
        Rng rng(55);
        for (auto& v : w) v = static_cast<float>(rng.normal() * 0.2);
    }
    auto za2 = model.encode(imgs, {0, 0});
    auto zb2 = model.encode(imgs, {2, 2});
    CHECK(za2.val() != zb2.val());
    // null embedding differs from a class embedding as well
    auto zn = model.encode(imgs, {cfg.null_id(), cfg.null_id()});
    CHECK(zn.val() != za2.val());
}

TEST_CASE("zero-init head decodes to a constant image") {
    const auto cfg = tiny_config();
    auto model = Model<float>::init(cfg, 31);
    ag::NoGradGuard ng;
    Rng rng(3);
    std::vector<float> e(static_cast<size_t>(2 * cfg.latent_len()));
    for (auto& v : e) v = static_cast<float>(rng.normal());
    auto v = ag::spherify_rows(ag::Var<float>::leaf({2, cfg.latent_len()}, e));
    auto x = model.decode(v, {});
    for (const float p : x.val()) {
        REQUIRE(std::isfinite(p));
        CHECK(p == x.val()[0]);
    }
}

TEST_CASE("untrained decode of random sphere points stays finite") {
    const auto cfg = tiny_config();
    auto model = Model<float>::init(cfg, 33);
    // randomize the head so outputs are nontrivial
    Rng prng(4);
    for (const char* name : {"dec.head.w", "dec.final.ada.w"}) {
        auto& w = model.params().at(name).val_mut();
        for (auto& v : w) v = static_cast<float>(prng.normal() * 0.1);
    }
    ag::NoGradGuard ng;
    Rng rng(8);
    std::vector<float> e(static_cast<size_t>(4 * cfg.latent_len()));
    for (auto& v : e) v = static_cast<float>(rng.normal());
    auto v = ag::spherify_rows(ag::Var<float>::leaf({4, cfg.latent_len()}, e));
    auto x = model.decode(v, {});
    for (const float p : x.val()) {
        REQUIRE(std::isfinite(p));
        REQUIRE(p >= -1.0f);
        REQUIRE(p <= 1.0f);
    }
}

TEST_CASE("positional tables: shapes, distinct rows, rotary norm preservation") {
    ModelConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 2;  // 16x16 grid
    cfg.hidden_size = 32;
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.mixer_depth = 0;
    cfg.latent_d = 4;
    cfg.n_classes = 0;
    const auto pos = build_positional<float>(cfg);
    CHECK(pos.abs_pe.shape == Shape{256, 32});

    // distinct rows for grids up to 64x64: sort rows and compare neighbors
    ModelConfig big = cfg;
    big.image_size = 128;  // 64x64 grid
    const auto big_pos = build_positional<double>(big);
    const int64_t tokens = big.tokens(), hidden = big.hidden_size;
    std::vector<int64_t> order(static_cast<size_t>(tokens));
    std::iota(order.begin(), order.end(), 0);
    auto row_less = [&](int64_t a, int64_t b) {
        return std::lexicographical_compare(
            big_pos.abs_pe.v.begin() + a * hidden, big_pos.abs_pe.v.begin() + (a + 1) * hidden,
            big_pos.abs_pe.v.begin() + b * hidden, big_pos.abs_pe.v.begin() + (b + 1) * hidden);
    };
    std::sort(order.begin(), order.end(), row_less);
    for (size_t i = 1; i < order.size(); ++i) {
        const bool equal = std::equal(big_pos.abs_pe.v.begin() + order[i - 1] * hidden,
                                      big_pos.abs_pe.v.begin() + (order[i - 1] + 1) * hidden,
                                      big_pos.abs_pe.v.begin() + order[i] * hidden);
        REQUIRE_FALSE(equal);
    }

    // rotary tables are unit rotations
    const int64_t pairs = cfg.head_dim() / 2;
    for (int64_t t = 0; t < cfg.tokens(); ++t)
        for (int64_t p = 0; p < pairs; ++p) {
            const double c = pos.rope_cos->v[static_cast<size_t>(t * pairs + p)];
            const double s = pos.rope_sin->v[static_cast<size_t>(t * pairs + p)];
            CHECK(std::abs(c * c + s * s - 1.0) < 1e-6);
        }
}

TEST_CASE("invalid inputs raise typed errors") {
    const auto cfg = tiny_config();
    auto model = Model<float>::init(cfg, 2);
    ag::NoGradGuard ng;
    auto imgs = random_images(cfg, 2, 5);
    CHECK_THROWS_AS(model.encode(imgs, {0, 99}), InvalidClass);
    CHECK_THROWS_AS(model.encode(imgs, {-1, 0}), InvalidClass);
    CHECK_THROWS_AS(model.encode(imgs, {0}), ConfigMismatch);
    auto bad = ag::Var<float>::leaf({2, 10, 10, 3},
                                    std::vector<float>(2 * 10 * 10 * 3, 0.1f));
    CHECK_THROWS_AS(model.encode(bad, {0, 1}), ConfigMismatch);

    ModelConfig uncond = cfg;
    uncond.n_classes = 0;
    auto umodel = Model<float>::init(uncond, 2);
    CHECK_THROWS_AS(umodel.encode(imgs, {0, 1}), InvalidClass);
    CHECK_NOTHROW(umodel.encode(imgs, {}));
}

TEST_CASE("checkpoint round trip is bit exact") {
    const auto cfg = tiny_config();
    auto model = Model<float>::init(cfg, 123);
    const auto tmp = std::filesystem::temp_directory_path() / "sphere_ckpt_test.ckpt";

    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.step = 17;
    ckpt.seed = 123;
    ckpt.arrays = model.state_dict();
    save_checkpoint(tmp, ckpt);

    const auto loaded = load_checkpoint(tmp);
    CHECK(loaded.step == 17);
    CHECK(loaded.seed == 123);
    CHECK(loaded.config == cfg);
    REQUIRE(loaded.arrays.size() == ckpt.arrays.size());
    for (const auto& [name, arr] : ckpt.arrays) {
        const auto& got = loaded.arrays.at(name);
        REQUIRE(got.shape == arr.shape);
        CHECK(got.v == arr.v);  // bitwise float equality
    }

    // load into a fresh model and compare parameters bitwise
    auto model2 = Model<float>::init(cfg, 999);
    load_into_model(tmp, model2);
    for (const auto& [name, p] : model.params())
        CHECK(model2.params().at(name).val() == p.val());
    std::filesystem::remove(tmp);
}

TEST_CASE("checkpoint config mismatch and corruption are detected") {
    const auto cfg = tiny_config();
    auto model = Model<float>::init(cfg, 1);
    const auto tmp = std::filesystem::temp_directory_path() / "sphere_ckpt_bad.ckpt";
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.arrays = model.state_dict();
    save_checkpoint(tmp, ckpt);

    ModelConfig other = cfg;
    other.latent_d = 8;
    auto other_model = Model<float>::init(other, 1);
    CHECK_THROWS_AS(load_into_model(tmp, other_model), ConfigMismatch);

    // truncate the file
    const auto full_size = std::filesystem::file_size(tmp);
    std::filesystem::resize_file(tmp, full_size / 2);
    CHECK_THROWS_AS(load_checkpoint(tmp), CorruptCheckpoint);

    std::ofstream junk(tmp, std::ios::binary | std::ios::trunc);
    junk << "not a checkpoint";
    junk.close();
    CHECK_THROWS_AS(load_checkpoint(tmp), CorruptCheckpoint);
    std::filesystem::remove(tmp);
}

TEST_SUITE_END();
