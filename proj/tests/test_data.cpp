#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "rsmpod/data.hpp"

using namespace rsmpod;

TEST_CASE("scene generation is a pure function of (spec, index)") {
    DatasetSpec spec = reference_spec(10, 555);
    SyntheticScene a = generate_scene(spec, 3);
    SyntheticScene b = generate_scene(spec, 3);
    CHECK(a.image.values() == b.image.values());
    REQUIRE(a.annotations.size() == b.annotations.size());
    for (size_t i = 0; i < a.annotations.size(); ++i) {
        CHECK(a.annotations[i].category == b.annotations[i].category);
        CHECK(a.annotations[i].box.cx == b.annotations[i].box.cx);
    }
    // different index gives a different scene
    SyntheticScene c = generate_scene(spec, 4);
    CHECK(a.image.values() != c.image.values());

    CHECK_THROWS_AS(generate_scene(spec, 10), ValidationError);
}

TEST_CASE("scene invariants hold over many scenes") {
    DatasetSpec spec = reference_spec(1000, 808);
    for (int i = 0; i < 1000; ++i) {
        SyntheticScene s = generate_scene(spec, i);
        CHECK(!s.annotations.empty());
        CHECK(s.annotations.size() <= static_cast<size_t>(spec.objects_max));
        for (const auto& a : s.annotations) {
            CHECK(a.box.w >= 4.0 / 64 - 1e-12);
            CHECK(a.box.h >= 4.0 / 64 - 1e-12);
            auto c = a.box.xyxy();
            CHECK(c[0] >= -1e-12);
            CHECK(c[1] >= -1e-12);
            CHECK(c[2] <= 1.0 + 1e-12);
            CHECK(c[3] <= 1.0 + 1e-12);
        }
        for (double v : s.image.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("object count stays within the configured range") {
    DatasetSpec spec = reference_spec(300, 31337);
    spec.objects_min = 2;
    spec.objects_max = 3;
    for (int i = 0; i < 300; ++i) {
        SyntheticScene s = generate_scene(spec, i);
        CHECK(s.annotations.size() >= 2);
        CHECK(s.annotations.size() <= 3);
    }
}

TEST_CASE("spec validation") {
    DatasetSpec spec = reference_spec(10, 1);
    spec.categories.resize(1);
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec = reference_spec(10, 1);
    spec.categories[0].shape = "hexagon";
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec = reference_spec(0, 1);
    CHECK_THROWS_AS(spec.validate(), ValidationError);
}

TEST_CASE("export/load round-trips exactly and records the master seed") {
    namespace fs = std::filesystem;
    std::string dir = "/tmp/rsmpod_ds_test";
    fs::remove_all(dir);
    DatasetSpec spec = reference_spec(4, 12321);
    export_dataset(spec, dir);

    // manifest carries the master seed
    std::ifstream ms(dir + "/manifest.json");
    std::string manifest((std::istreambuf_iterator<char>(ms)), std::istreambuf_iterator<char>());
    CHECK(manifest.find("12321") != std::string::npos);

    Dataset loaded = load_dataset(dir);
    REQUIRE(loaded.scenes.size() == 4);
    for (int i = 0; i < 4; ++i) {
        SyntheticScene fresh = generate_scene(spec, i);
        CHECK(loaded.scenes[static_cast<size_t>(i)].image.values() == fresh.image.values());
        REQUIRE(loaded.scenes[static_cast<size_t>(i)].annotations.size() ==
                fresh.annotations.size());
        for (size_t a = 0; a < fresh.annotations.size(); ++a) {
            CHECK(loaded.scenes[static_cast<size_t>(i)].annotations[a].category ==
                  fresh.annotations[a].category);
            CHECK(loaded.scenes[static_cast<size_t>(i)].annotations[a].box.cx ==
                  doctest::Approx(fresh.annotations[a].box.cx).epsilon(1e-15));
        }
    }
}

TEST_CASE("tampered records fail loudly") {
    namespace fs = std::filesystem;
    std::string dir = "/tmp/rsmpod_ds_tamper";
    fs::remove_all(dir);
    DatasetSpec spec = reference_spec(2, 999);
    export_dataset(spec, dir);

    // flip one byte in a payload
    {
        std::fstream f(dir + "/scenes/000001.bin",
                       std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(100);
        char c;
        f.seekg(100);
        f.get(c);
        f.seekp(100);
        c = static_cast<char>(c ^ 0x42);
        f.put(c);
    }
    CHECK_THROWS_AS(load_dataset(dir), IoError);

    // truncate the payload instead
    fs::remove_all(dir);
    export_dataset(spec, dir);
    fs::resize_file(dir + "/scenes/000000.bin", 1000);
    CHECK_THROWS_AS(load_dataset(dir), IoError);

    // version mismatch
    fs::remove_all(dir);
    export_dataset(spec, dir);
    {
        std::ifstream in(dir + "/manifest.json");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        auto pos = text.find("\"version\": 1");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 12, "\"version\": 9");
        std::ofstream out(dir + "/manifest.json");
        out << text;
    }
    CHECK_THROWS_AS(load_dataset(dir), IoError);
}

TEST_CASE("streamed dataset equals exported dataset") {
    DatasetSpec spec = reference_spec(3, 2024);
    Dataset streamed = stream_dataset(spec);
    REQUIRE(streamed.scenes.size() == 3);
    for (int i = 0; i < 3; ++i)
        CHECK(streamed.scenes[static_cast<size_t>(i)].image.values() ==
              generate_scene(spec, i).image.values());
}
