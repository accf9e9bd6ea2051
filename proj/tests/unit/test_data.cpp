#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "affmtl/data.hpp"
#include "affmtl/errors.hpp"
#include "affmtl/rng.hpp"

using namespace affmtl;

namespace {

const std::string kHeader(kAnnotationHeader);

std::vector<AnnotationRecord> parse(const std::string& body) {
  std::istringstream in(kHeader + "\n" + body);
  return parse_annotations(in);
}

AnnotationRecord make(std::string video, std::uint32_t frame, double v = 0.1, double a = 0.2,
                      int expr = 3, int au = 0, std::size_t dim = 2) {
  AnnotationRecord r;
  r.video_id = std::move(video);
  r.frame_index = frame;
  r.valence = v;
  r.arousal = a;
  r.expression = expr;
  r.aus.fill(au);
  r.features.assign(dim, double(frame) + 0.5);
  return r;
}

// Records of one video with the given frame indices, features = frame index.
DatasetSplit video_split(const std::vector<std::pair<std::string, std::size_t>>& videos) {
  std::vector<AnnotationRecord> recs;
  for (const auto& [id, len] : videos)
    for (std::size_t f = 0; f < len; ++f) recs.push_back(make(id, std::uint32_t(f)));
  return DatasetSplit::from(std::move(recs));
}

}  // namespace

TEST_CASE("parse: valid rows, sentinels and error reporting") {
  const auto recs = parse(
      "v1,0,0.5,-0.25,3,1,0,0,0,0,0,0,0,0,0,1,0\n"
      "v1,1,-5,-5,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1\n");
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].valence == 0.5);
  CHECK(recs[0].aus[0] == 1);
  CHECK(recs[0].aus[10] == 1);
  CHECK_FALSE(recs[1].au_valid());
  CHECK_FALSE(recs[1].va_valid());
  CHECK_FALSE(recs[1].expr_valid());

  try {
    parse("v1,0,0.5,-0.25,3,1,0,0,0,0,0,0,0,0,0,1,0\nv1,1,0.5,0.5,9,0,0,0,0,0,0,0,0,0,0,0,0\n");
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    CHECK(what.find("expression") != std::string::npos);
    CHECK(what.find("line 3") != std::string::npos);
  }
  CHECK_THROWS_AS(parse("v1,0,1.5,0,3,0,0,0,0,0,0,0,0,0,0,0,0\n"), ValidationError);
  CHECK_THROWS_AS(parse("v1,0,0.5,0,3,0,0,0,0,0,0,0,0,0,0,0,2\n"), ValidationError);
  // Partial AU sentinels are not allowed.
  CHECK_THROWS_AS(parse("v1,0,0.5,0,3,-1,0,0,0,0,0,0,0,0,0,0,0\n"), ValidationError);
  try {
    parse("v1,0,0.5,0.5\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(parse("v1,x,0.5,0,3,0,0,0,0,0,0,0,0,0,0,0,0\n"), ParseError);
  std::istringstream bad_header("video,frame\n");
  CHECK_THROWS_AS(parse_annotations(bad_header), ParseError);
}

TEST_CASE("dedup: identity, exact duplicates, conflicts") {
  const auto recs = parse(
      "v1,0,0.5,-0.25,3,1,0,0,0,0,0,0,0,0,0,1,0\n"
      "v1,1,0.1,0.1,2,0,0,0,0,0,0,0,0,0,0,0,0\n"
      "v1,0,0.5,-0.25,3,1,0,0,0,0,0,0,0,0,0,1,0\n");
  CHECK(recs.size() == 3);
  const DedupResult d = dedup(recs);
  CHECK(d.records.size() == 2);
  CHECK(d.removed == 1);
  CHECK(d.records[0].frame_index == 0);
  CHECK(d.records[1].frame_index == 1);

  const DedupResult same = dedup(d.records);
  CHECK(same.removed == 0);
  CHECK(same.records.size() == 2);

  auto conflict = recs;
  conflict[2].valence = 0.6;
  try {
    dedup(conflict);
    FAIL("expected ConflictError");
  } catch (const ConflictError& e) {
    const std::string what = e.what();
    CHECK(what.find("v1#0") != std::string::npos);
    CHECK(what.find("0.6") != std::string::npos);
  }
}

TEST_CASE("filter_valid: fixture counts, independence, idempotence") {
  std::vector<AnnotationRecord> recs;
  for (std::uint32_t i = 0; i < 10; ++i) {
    AnnotationRecord r = make("v", i);
    if (i == 1 || i == 4) r.valence = kVaSentinel;
    if (i == 7) r.arousal = kVaSentinel;
    if (i == 2) r.expression = kExprSentinel;
    if (i == 5) r.aus.fill(-1);
    recs.push_back(r);
  }
  const DatasetSplit va = filter_valid(recs, LabelTask::VA);
  CHECK(va.records.size() == 7);
  CHECK(va.va_valid == 7);
  const DatasetSplit au = filter_valid(recs, LabelTask::AU);
  const DatasetSplit ex = filter_valid(recs, LabelTask::EXPR);
  auto has = [](const DatasetSplit& s, std::uint32_t f) {
    return std::any_of(s.records.begin(), s.records.end(), [&](const auto& r) { return r.frame_index == f; });
  };
  CHECK(has(au, 2));
  CHECK_FALSE(has(ex, 2));
  CHECK(has(ex, 5));
  CHECK_FALSE(has(au, 5));

  for (LabelTask t : {LabelTask::AU, LabelTask::EXPR, LabelTask::VA}) {
    const DatasetSplit once = filter_valid(recs, t);
    const DatasetSplit twice = filter_valid(once, t);
    REQUIRE(once.records.size() == twice.records.size());
    for (std::size_t i = 0; i < once.records.size(); ++i)
      CHECK(once.records[i].key() == twice.records[i].key());
  }

  const DatasetSplit all = DatasetSplit::from(recs);
  CHECK(all.va_valid == 7);
  CHECK(all.expr_valid == 9);
  CHECK(all.au_valid == 9);
  CHECK(all.expr_histogram[3] == 9);

  std::vector<AnnotationRecord> none(2, make("v", 0));
  for (auto& r : none) r.valence = kVaSentinel;
  CHECK(filter_valid(none, LabelTask::VA).records.empty());
}

TEST_CASE("build_windows: tiling, stride overlap and padding") {
  const auto w1 = build_windows(video_split({{"a", 10}}), 5, 5);
  REQUIRE(w1.size() == 2);
  for (const auto& w : w1)
    for (bool m : w.pad_mask) CHECK(m);

  const DatasetSplit s50 = video_split({{"a", 50}});
  const auto w2 = build_windows(s50, 20, 15);
  REQUIRE(w2.size() == 4);
  std::vector<std::uint32_t> starts;
  for (const auto& w : w2) starts.push_back(w.start_frame);
  CHECK(starts == std::vector<std::uint32_t>{0, 15, 30, 45});
  const auto& last = w2.back();
  CHECK(std::count(last.pad_mask.begin(), last.pad_mask.end(), false) == 15);
  for (std::size_t i = 5; i < 20; ++i) CHECK(last.frames[i] == last.frames[4]);

  const auto w3 = build_windows(video_split({{"a", 7}}), 1, 1);
  CHECK(w3.size() == 7);

  CHECK_THROWS_AS(build_windows(s50, 5, 6), ConfigError);
  CHECK_THROWS_AS(build_windows(s50, 0, 0), ConfigError);
}

TEST_CASE("build_windows: count, single-video and padding properties over many layouts") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    std::vector<std::pair<std::string, std::size_t>> videos;
    const std::size_t n_videos = 1 + rng.below(4);
    for (std::size_t v = 0; v < n_videos; ++v) videos.push_back({"vid" + std::to_string(v), 1 + rng.below(40)});
    const std::size_t s = 1 + rng.below(12);
    const std::size_t w = 1 + rng.below(s);
    const DatasetSplit split = video_split(videos);
    const auto windows = build_windows(split, s, w);
    std::size_t expect = 0;
    for (const auto& [id, len] : videos) expect += (len + w - 1) / w;
    CHECK(windows.size() == expect);
    for (const auto& win : windows) {
      REQUIRE(win.frames.size() == s);
      std::size_t last_real = win.frames[0];
      for (std::size_t i = 0; i < s; ++i) {
        const auto& r = split.records[win.frames[i]];
        CHECK(r.video_id == win.video_id);
        if (win.pad_mask[i]) {
          CHECK(r.frame_index == win.start_frame + i);
          CHECK((i == 0 || win.pad_mask[i - 1]));
          last_real = win.frames[i];
        } else {
          CHECK(win.frames[i] == last_real);
        }
      }
      CHECK(win.pad_mask[0]);
    }
  }
}

TEST_CASE("build_windows: a gap in frame indices starts a new segment") {
  std::vector<AnnotationRecord> recs;
  for (std::uint32_t f : {0u, 1u, 2u, 10u, 11u}) recs.push_back(make("a", f));
  const auto windows = build_windows(DatasetSplit::from(recs), 4, 4);
  REQUIRE(windows.size() == 2);
  CHECK(windows[0].start_frame == 0);
  CHECK(std::count(windows[0].pad_mask.begin(), windows[0].pad_mask.end(), true) == 3);
  CHECK(windows[1].start_frame == 10);
  CHECK(std::count(windows[1].pad_mask.begin(), windows[1].pad_mask.end(), true) == 2);
}

TEST_CASE("batches: partition sizes, determinism, canonical order, padded labels") {
  const DatasetSplit split = video_split({{"b", 6}, {"a", 4}});
  const auto windows = build_windows(split, 1, 1);
  REQUIRE(windows.size() == 10);
  const auto order = batch_order(10, 4, 7, true);
  std::vector<std::size_t> sizes;
  for (const auto& b : order) sizes.push_back(b.size());
  CHECK(sizes == std::vector<std::size_t>{4, 4, 2});
  CHECK(order == batch_order(10, 4, 7, true));
  CHECK(order != batch_order(10, 4, 8, true));
  std::set<std::size_t> seen;
  for (const auto& b : order) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 10);

  const auto plain = batches(split, windows, 4, 0, false);
  std::vector<FrameKey> keys;
  for (const auto& b : plain) keys.insert(keys.end(), b.keys.begin(), b.keys.end());
  CHECK(std::is_sorted(keys.begin(), keys.end()));
  CHECK(keys.front() == FrameKey{"a", 0});
  CHECK(plain[0].frames.shape() == Shape{4, 2});

  const auto padded = build_windows(video_split({{"a", 5}}), 4, 4);
  const Batch b = make_batch(video_split({{"a", 5}}), padded, std::vector<std::size_t>{0, 1});
  CHECK(b.b == 2);
  CHECK(b.s == 4);
  CHECK(b.rows() == 8);
  CHECK(b.pad_mask == std::vector<bool>{true, true, true, true, true, false, false, false});
  CHECK(b.keys[7] == FrameKey{"a", 4});
  CHECK(b.frames[7 * 2] == 4.5);
  CHECK_THROWS_AS(batch_order(3, 0, 0, false), ConfigError);
}

TEST_CASE("serialize and feature file round trips") {
  std::vector<AnnotationRecord> recs;
  Rng rng(3);
  for (std::uint32_t f = 0; f < 20; ++f) {
    AnnotationRecord r = make(f < 10 ? "x" : "y", f, rng.uniform(-1, 1), rng.uniform(-1, 1), int(rng.below(8)));
    for (auto& a : r.aus) a = int(rng.below(2));
    if (f % 7 == 0) r.valence = r.arousal = kVaSentinel;
    if (f % 5 == 0) r.aus.fill(-1);
    r.features = {rng.normal(), rng.normal(), 1.0 / 3.0};
    recs.push_back(r);
  }
  std::istringstream in(serialize_annotations(recs));
  auto back = parse_annotations(in);
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].key() == recs[i].key());
    CHECK(back[i].same_labels(recs[i]));
  }
  const FeatureMap fm = decode_features(encode_features(recs));
  attach_features(back, fm);
  for (std::size_t i = 0; i < recs.size(); ++i) CHECK(back[i].features == recs[i].features);

  FeatureMap missing = fm;
  missing.erase(FrameKey{"y", 13});
  try {
    attach_features(back, missing);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("y#13") != std::string::npos);
  }
  const std::string bytes = encode_features(recs);
  CHECK_THROWS_AS(decode_features(bytes + "x"), IoError);
}

TEST_CASE("synth: validity, ranges, determinism, expression octants") {
  SynthOptions opt;
  opt.num_videos = 3;
  opt.frames_per_video = 60;
  opt.input_dim = 8;
  const auto recs = synth_generate(opt);
  CHECK(recs.size() == 180);
  for (const auto& r : recs) {
    CHECK(r.va_valid());
    CHECK(r.expr_valid());
    CHECK(r.au_valid());
    CHECK(std::fabs(r.valence) <= 1.0);
    CHECK(std::fabs(r.arousal) <= 1.0);
    CHECK(r.expression == expression_octant(r.valence, r.arousal));
    CHECK(r.features.size() == 8);
  }
  CHECK(encode_features(synth_generate(opt)) == encode_features(recs));
  CHECK(serialize_annotations(synth_generate(opt)) == serialize_annotations(recs));
  SynthOptions other = opt;
  other.seed = 1;
  CHECK(serialize_annotations(synth_generate(other)) != serialize_annotations(recs));

  opt.sentinel_rates = {0.2, 0.2, 0.2};
  const auto holes = synth_generate(opt);
  const DatasetSplit s = DatasetSplit::from(holes);
  CHECK(s.va_valid < 180);
  CHECK(s.expr_valid < 180);
  CHECK(s.au_valid < 180);
  opt.sentinel_rates = {1.0, 0, 0};
  CHECK_THROWS_AS(synth_generate(opt), ConfigError);

  CHECK(expression_octant(1.0, 0.01) == 4);
  CHECK(expression_octant(-1.0, -0.01) == 0);
  std::set<int> octants;
  for (int k = 0; k < 8; ++k) {
    const double angle = -M_PI + (k + 0.5) * M_PI / 4.0;
    octants.insert(expression_octant(std::cos(angle), std::sin(angle)));
  }
  CHECK(octants.size() == 8);
}

TEST_CASE("dataset files and video split") {
  SynthOptions opt;
  opt.num_videos = 4;
  opt.frames_per_video = 30;
  opt.input_dim = 4;
  const auto recs = synth_generate(opt);
  const auto dir = std::filesystem::temp_directory_path() / "affmtl_test_data";
  std::filesystem::remove_all(dir);
  write_dataset(dir, recs);
  CHECK(std::filesystem::exists(dir / "annotations.csv"));
  CHECK(std::filesystem::exists(dir / "features.bin"));
  const Splits splits = load_splits(dir, 0.25);
  CHECK(splits.train.records.size() == 90);
  CHECK(splits.val.records.size() == 30);
  for (const auto& r : splits.val.records) CHECK(r.video_id == "vid003");
  CHECK(splits.val.records.front().features == recs[90].features);
  std::filesystem::remove_all(dir);

  const Splits half = split_by_video(recs, 0.5);
  CHECK(half.val.records.size() == 60);
  CHECK_THROWS_AS(split_by_video(recs, 1.0), ConfigError);
}
