#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "wiss/data_model.hpp"
#include "wiss/error.hpp"

using namespace wiss;
using testutil::TempDir;

namespace {

void write_raw(const std::filesystem::path& header, const std::string& json, size_t bytes) {
  write_text_file(header, json);
  std::ofstream(raw_path_for(header), std::ios::binary) << std::string(bytes, '\0');
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::kIo;
}

VertebraLandmarks square(const std::string& id, double x0, double y0, double s) {
  return {id, {Point2{x0, y0}, Point2{x0 + s, y0}, Point2{x0 + s, y0 + s}, Point2{x0, y0 + s}}};
}

}  // namespace

TEST_CASE("zero volume reads as all zeros") {
  TempDir t("dm_zero");
  const auto h = t.path / "v.json";
  write_raw(h, R"({"dims":[1,2,2],"spacing_mm":[1,1,1],"dtype":"int16le"})", 8);
  const Volume v = read_volume(h);
  CHECK(v.dims() == std::array<int, 3>{1, 2, 2});
  CHECK(v.id() == "v");
  for (auto x : v.voxels()) CHECK(x == 0);
}

TEST_CASE("volume read failures are distinct") {
  TempDir t("dm_err");
  CHECK(code_of([&] { read_volume(t.path / "absent.json"); }) == ErrorCode::kMissingFile);

  const auto short_raw = t.path / "short.json";
  write_raw(short_raw, R"({"dims":[2,2,2],"spacing_mm":[1,1,1],"dtype":"int16le"})", 8);
  CHECK(code_of([&] { read_volume(short_raw); }) == ErrorCode::kSizeMismatch);

  const auto bad_spacing = t.path / "spacing.json";
  write_raw(bad_spacing, R"({"dims":[1,1,1],"spacing_mm":[1,0,1],"dtype":"int16le"})", 2);
  CHECK(code_of([&] { read_volume(bad_spacing); }) == ErrorCode::kInvalidSpacing);

  const auto garbage = t.path / "garbage.json";
  write_raw(garbage, "{not json", 2);
  CHECK(code_of([&] { read_volume(garbage); }) == ErrorCode::kMalformed);
}

TEST_CASE("volume payload is little-endian int16") {
  TempDir t("dm_le");
  Volume v("one", {1, 1, 1}, {1, 1, 1});
  v.at(0, 0, 0) = 100;
  write_volume(v, t.path / "one.json");
  const auto bytes = testutil::read_bytes(t.path / "one.raw");
  REQUIRE(bytes.size() == 2);
  CHECK(static_cast<unsigned char>(bytes[0]) == 0x64);
  CHECK(static_cast<unsigned char>(bytes[1]) == 0x00);

  Volume neg("neg", {1, 1, 1}, {1, 1, 1});
  neg.at(0, 0, 0) = -2;
  write_volume(neg, t.path / "neg.json");
  const auto nb = testutil::read_bytes(t.path / "neg.raw");
  CHECK(static_cast<unsigned char>(nb[0]) == 0xFE);
  CHECK(static_cast<unsigned char>(nb[1]) == 0xFF);
}

TEST_CASE("volume round trip is byte identical") {
  TempDir t("dm_rt");
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> d(-32768, 32767);
  Volume v("rt", {3, 4, 5}, {2.0, 0.8, 0.7});
  for (int s = 0; s < 3; ++s)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) v.at(s, y, x) = static_cast<std::int16_t>(d(rng));
  write_volume(v, t.path / "rt.json");
  const Volume back = read_volume(t.path / "rt.json");
  CHECK(back == v);
  write_volume(back, t.path / "again" / "rt.json");
  CHECK(testutil::read_bytes(t.path / "rt.raw") == testutil::read_bytes(t.path / "again" / "rt.raw"));

  Volume zeros("z", {2, 2, 2}, {1, 1, 1});
  write_volume(zeros, t.path / "z.json");
  for (char c : testutil::read_bytes(t.path / "z.raw")) CHECK(c == 0);
}

TEST_CASE("mid slice is floor of half the slice count") {
  CHECK(Volume("a", {1, 2, 2}, {1, 1, 1}).mid_slice() == 0);
  CHECK(Volume("a", {9, 2, 2}, {1, 1, 1}).mid_slice() == 4);
  CHECK(Volume("a", {10, 2, 2}, {1, 1, 1}).mid_slice() == 5);
}

TEST_CASE("annotation parsing and validation") {
  TempDir t("dm_ann");
  write_text_file(t.path / "ok.json",
                  R"({"volume_id":"v","slice_index":0,"vertebrae":[{"id":"L1","corners":[[0,0],[4,0],[4,4],[0,4]]}]})");
  const auto a = read_annotation(t.path / "ok.json", SliceBounds{1, 8, 8});
  REQUIRE(a.vertebrae.size() == 1);
  CHECK(a.vertebrae[0].corners[0] == Point2{0, 0});

  write_text_file(t.path / "bow.json",
                  R"({"volume_id":"v","slice_index":0,"vertebrae":[{"id":"L1","corners":[[0,0],[4,4],[4,0],[0,4]]}]})");
  CHECK(code_of([&] { read_annotation(t.path / "bow.json"); }) == ErrorCode::kSelfIntersecting);

  write_text_file(t.path / "out.json",
                  R"({"volume_id":"v","slice_index":0,"vertebrae":[{"id":"L1","corners":[[0,0],[9,0],[9,4],[0,4]]}]})");
  CHECK(code_of([&] { read_annotation(t.path / "out.json", SliceBounds{1, 8, 8}); }) == ErrorCode::kOutOfBounds);

  write_text_file(t.path / "slice.json",
                  R"({"volume_id":"v","slice_index":3,"vertebrae":[{"id":"L1","corners":[[0,0],[4,0],[4,4],[0,4]]}]})");
  CHECK(code_of([&] { read_annotation(t.path / "slice.json", SliceBounds{2, 8, 8}); }) == ErrorCode::kOutOfBounds);

  write_text_file(t.path / "flat.json",
                  R"({"volume_id":"v","slice_index":0,"vertebrae":[{"id":"L1","corners":[[0,0],[1,1],[2,2],[3,3]]}]})");
  CHECK(code_of([&] { read_annotation(t.path / "flat.json"); }) == ErrorCode::kDegenerateGeometry);

  write_text_file(t.path / "dup.json", R"({"volume_id":"v","slice_index":0,"vertebrae":[
      {"id":"L1","corners":[[0,0],[2,0],[2,2],[0,2]]},{"id":"L1","corners":[[4,4],[6,4],[6,6],[4,6]]}]})");
  CHECK(code_of([&] { read_annotation(t.path / "dup.json"); }) == ErrorCode::kDuplicateEntry);

  write_text_file(t.path / "broken.json", R"({"volume_id":"v",)");
  CHECK(code_of([&] { read_annotation(t.path / "broken.json"); }) == ErrorCode::kMalformed);
}

TEST_CASE("annotation round trip") {
  TempDir t("dm_ann_rt");
  LandmarkAnnotation a{"vol", 2, {square("L1", 1.5, 2.25, 3.0), square("L2", 10, 12, 4.125)}};
  write_annotation(a, t.path / "a.json");
  CHECK(read_annotation(t.path / "a.json") == a);
}

TEST_CASE("corners are canonicalized to start top-left and run clockwise") {
  const std::array<Point2, 4> shuffled{Point2{4, 4}, Point2{0, 4}, Point2{0, 0}, Point2{4, 0}};
  const auto c = canonicalize_corners(shuffled);
  CHECK(c[0] == Point2{0, 0});
  CHECK(c[1] == Point2{4, 0});
  CHECK(c[2] == Point2{4, 4});
  CHECK(c[3] == Point2{0, 4});
  const std::array<Point2, 4> ccw{Point2{0, 0}, Point2{0, 4}, Point2{4, 4}, Point2{4, 0}};
  CHECK(canonicalize_corners(ccw) == c);
}

TEST_CASE("RLE round trip and run layout") {
  Mask2 m(2, 3, 0);
  m.at(0, 1) = 1;
  m.at(0, 2) = 1;
  m.at(1, 2) = 1;
  const auto rle = rle_encode(m);
  CHECK(rle == std::vector<std::uint32_t>{1, 2, 2, 1});
  CHECK(rle_decode(rle, 2, 3) == m);

  Mask2 full(2, 2, 1);
  CHECK(rle_encode(full) == std::vector<std::uint32_t>{0, 4});

  std::mt19937_64 rng(11);
  for (int i = 0; i < 50; ++i) {
    const auto r = testutil::random_mask(rng, 7, 9, 0.3);
    CHECK(rle_decode(rle_encode(r), 7, 9) == r);
  }
  CHECK_THROWS_AS(rle_decode({1, 2}, 2, 3), Error);
}

TEST_CASE("label store keys, duplicates and round trip") {
  TempDir t("dm_store");
  Mask2 a(4, 4, 0), b(4, 4, 0);
  a.at(1, 1) = 1;
  b.at(2, 2) = 1;
  LabelStore store;
  store.put({"v", 4, 0}, {{"L1", a, Provenance::kCoarse, 0, false}, {"L2", b, Provenance::kCoarse, 0, false}}, "coarse");
  store.put({"v", 4, 1}, {{"roi01", a, Provenance::kCrfRefined, 1, false}}, "self_train");
  store.put({"v", 5, 1}, {{"roi01", b, Provenance::kSelected, 1, true}}, "propagate");

  CHECK_THROWS_AS(store.put({"v", 4, 2}, {{"x", a, Provenance::kCoarse, 2, false}, {"x", b, Provenance::kCoarse, 2, false}},
                            "dup"),
                  Error);
  CHECK(store.latest_iteration("v", 4) == 1);
  CHECK(store.iterations("v", 4) == std::vector<int>{0, 1});
  CHECK(store.slice_indices("v") == std::vector<int>{4, 5});
  CHECK(store.latest("v", 7) == nullptr);

  write_label_store(store, t.path / "labels");
  CHECK(read_label_store(t.path / "labels") == store);
}

TEST_CASE("provenance moves forward only") {
  CHECK(provenance_can_follow(Provenance::kCoarse, Provenance::kSelected));
  CHECK(provenance_can_follow(Provenance::kSelected, Provenance::kCrfRefined));
  CHECK_FALSE(provenance_can_follow(Provenance::kCrfRefined, Provenance::kCoarse));
  CHECK_FALSE(provenance_can_follow(Provenance::kGroundTruth, Provenance::kCoarse));
  for (auto p : {Provenance::kCoarse, Provenance::kModel, Provenance::kSelected, Provenance::kCrfRefined,
                 Provenance::kGroundTruth})
    CHECK(provenance_from_string(to_string(p)) == p);
}

TEST_CASE("instance and prediction validation") {
  InstanceMask empty{"x", Mask2(3, 3, 0), Provenance::kSelected, 1, false};
  CHECK_THROWS_AS(validate(empty), Error);
  empty.provenance = Provenance::kModel;
  CHECK_NOTHROW(validate(empty));

  InstancePrediction p{0.5, {0, 0, 2, 2}, Image2(2, 2, 0.5)};
  CHECK_NOTHROW(validate(p, 4, 4));
  p.prob_map.at(0, 0) = 1.5;
  CHECK_THROWS_AS(validate(p, 4, 4), Error);
  p.prob_map.at(0, 0) = 0.5;
  p.bbox = {3, 3, 5, 5};
  CHECK_THROWS_AS(validate(p, 4, 4), Error);
}
