#include "doctest.h"
#include "xml_check.hpp"

#include "groundseq/data.hpp"
#include "groundseq/eval.hpp"
#include "groundseq/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

using namespace groundseq;

namespace {

std::string fixture(const char* name) { return std::string(GROUNDSEQ_FIXTURE_DIR) + "/" + name; }

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Counts 0.1 px cells whose centres fall inside each box. Corners lie on the
// 0.1 px lattice, so the count is the exact area in cells.
double raster_iou(const BBox& a, const BBox& b) {
  const double lo_x = std::min(a.x0, b.x0), hi_x = std::max(a.x1, b.x1);
  const double lo_y = std::min(a.y0, b.y0), hi_y = std::max(a.y1, b.y1);
  const int nx = static_cast<int>(std::lround((hi_x - lo_x) * 10));
  const int ny = static_cast<int>(std::lround((hi_y - lo_y) * 10));
  long in_a = 0, in_b = 0, both = 0;
  for (int j = 0; j < ny; ++j) {
    const double y = lo_y + (j + 0.5) / 10;
    for (int i = 0; i < nx; ++i) {
      const double x = lo_x + (i + 0.5) / 10;
      const bool ia = x > a.x0 && x < a.x1 && y > a.y0 && y < a.y1;
      const bool ib = x > b.x0 && x < b.x1 && y > b.y0 && y < b.y1;
      in_a += ia;
      in_b += ib;
      both += ia && ib;
    }
  }
  return static_cast<double>(both) / static_cast<double>(in_a + in_b - both);
}

BBox lattice_box(Rng& rng, double extent) {
  const auto tick = [&](std::int64_t lo, std::int64_t hi) { return static_cast<double>(rng.uniform_int(lo, hi)) / 10; };
  const double x0 = tick(0, static_cast<std::int64_t>(extent * 10) - 20);
  const double y0 = tick(0, static_cast<std::int64_t>(extent * 10) - 20);
  return {x0, y0, x0 + tick(10, static_cast<std::int64_t>((extent - x0) * 10)),
          y0 + tick(10, static_cast<std::int64_t>((extent - y0) * 10))};
}

PredictionRecord pred(const std::string& id, const BBox& b, bool wellformed = true) {
  PredictionRecord p;
  p.sample_id = id;
  p.box = b;
  p.wellformed = wellformed;
  return p;
}

// gt [0,0,100,10] against [0,0,w,10] has IoU w / 100.
struct HandCase {
  std::vector<GroundTruth> gts;
  std::vector<PredictionRecord> preds;
};

HandCase five_iou_case() {
  HandCase h;
  const double widths[] = {90, 60, 50, 49, 10};
  for (int i = 0; i < 5; ++i) {
    const std::string id = "s" + std::to_string(i);
    h.gts.push_back({id, BBox{0, 0, 100, 10}});
    h.preds.push_back(pred(id, BBox{0, 0, widths[i], 10}));
  }
  return h;
}

}  // namespace

TEST_CASE("iou: identical, disjoint, hand case and errors") {
  CHECK(iou(BBox{1, 2, 3, 4}, BBox{1, 2, 3, 4}) == 1.0);
  CHECK(iou(BBox{0, 0, 10, 10}, BBox{20, 20, 30, 30}) == 0.0);
  CHECK(iou(BBox{0, 0, 10, 10}, BBox{10, 0, 20, 10}) == 0.0);  // shared edge only
  CHECK(std::abs(iou(BBox{0, 0, 10, 10}, BBox{5, 0, 15, 10}) - 1.0 / 3.0) <= 1e-12);
  CHECK_THROWS_AS(iou(BBox{5, 0, 1, 10}, BBox{0, 0, 1, 1}), InvalidBoxError);
}

TEST_CASE("property: iou matches the 10x rasterized counting oracle") {
  Rng rng(51);
  double worst = 0;
  for (int k = 0; k < 1000; ++k) {
    const BBox a = lattice_box(rng, 40), b = lattice_box(rng, 40);
    const double v = iou(a, b);
    worst = std::max(worst, std::abs(v - raster_iou(a, b)));
    CHECK(v == doctest::Approx(iou(b, a)).epsilon(1e-15));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("property: iou equals 1 only for identical boxes") {
  Rng rng(52);
  for (int k = 0; k < 500; ++k) {
    const BBox a = lattice_box(rng, 64);
    BBox b = a;
    b.x1 += 0.1;
    CHECK(iou(a, b) < 1.0);
    CHECK(iou(a, a) == 1.0);
  }
}

TEST_CASE("evaluate: five IoUs give AP50 exactly 0.6") {
  const auto h = five_iou_case();
  const EvalResult r = evaluate(h.preds, h.gts);
  CHECK(r.n_samples == 5);
  CHECK(r.n_correct == 3);
  CHECK(r.ap50 == 0.6);
  CHECK(r.n_malformed == 0);
  CHECK(r.per_sample[2].iou == 0.5);  // exactly on the threshold counts
  CHECK(r.mean_iou == doctest::Approx((0.9 + 0.6 + 0.5 + 0.49 + 0.1) / 5).epsilon(1e-14));
}

TEST_CASE("evaluate: perfect, missing, malformed and duplicate predictions") {
  std::vector<GroundTruth> gts;
  std::vector<PredictionRecord> perfect, fallback;
  Rng rng(53);
  for (int i = 0; i < 20; ++i) {
    const double x = rng.uniform(0, 100), y = rng.uniform(0, 100);
    gts.push_back({"g" + std::to_string(i), BBox{x, y, x + 16, y + 16}});
    perfect.push_back(pred(gts.back().sample_id, gts.back().box));
    fallback.push_back(pred(gts.back().sample_id, BBox{0, 0, 128, 128}, false));
  }
  const EvalResult p = evaluate(perfect, gts);
  CHECK(p.ap50 == 1.0);
  CHECK(p.mean_iou == 1.0);

  const EvalResult f = evaluate(fallback, gts);
  CHECK(f.ap50 == 0.0);
  CHECK(f.n_malformed == f.n_samples);
  CHECK(f.n_samples == 20);

  std::vector<PredictionRecord> partial(perfect.begin(), perfect.begin() + 15);
  partial.push_back(pred("not-a-gt", BBox{0, 0, 1, 1}));
  const EvalResult m = evaluate(partial, gts);
  CHECK(m.n_samples == 20);
  CHECK(m.n_missing == 5);
  CHECK(m.ap50 == 0.75);
  CHECK(m.per_sample.back().missing);
  CHECK(m.per_sample.back().iou == 0.0);

  auto dup = perfect;
  dup.push_back(perfect.front());
  CHECK_THROWS_AS(evaluate(dup, gts), DuplicatePredictionError);
  CHECK_THROWS(evaluate(perfect, gts, 1.0));
  CHECK_THROWS(evaluate(perfect, gts, 0.0));
}

TEST_CASE("property: evaluate is order invariant, recountable and monotone in threshold") {
  Rng rng(54);
  std::vector<GroundTruth> gts;
  std::vector<PredictionRecord> preds;
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(0, 90), y = rng.uniform(0, 90);
    gts.push_back({"g" + std::to_string(i), BBox{x, y, x + 30, y + 30}});
    const double dx = rng.uniform(-20, 20), dy = rng.uniform(-20, 20);
    preds.push_back(pred(gts.back().sample_id, BBox{x + dx, y + dy, x + dx + 30, y + dy + 30}, rng.uniform() < 0.9));
  }
  const EvalResult base = evaluate(preds, gts);
  const auto n_ge = std::count_if(base.per_sample.begin(), base.per_sample.end(),
                                  [](const SampleScore& s) { return s.iou >= 0.5; });
  CHECK(base.ap50 == static_cast<double>(n_ge) / 200.0);

  for (int k = 0; k < 20; ++k) {
    auto shuffled = preds;
    for (std::size_t i = shuffled.size() - 1; i > 0; --i) {
      std::swap(shuffled[i], shuffled[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    }
    const EvalResult r = evaluate(shuffled, gts);
    CHECK(r.ap50 == base.ap50);
    CHECK(r.mean_iou == base.mean_iou);
  }
  double prev = 1.0;
  for (double t = 0.05; t < 1.0; t += 0.05) {
    const double ap = evaluate(preds, gts, t).ap50;
    CHECK(ap <= prev);
    prev = ap;
  }
}

TEST_CASE("evaluate: Talk2Car fixture with planted predictions scores 3 of 5") {
  const auto records = load_talk2car_subset(fixture("talk2car_subset.json"));
  REQUIRE(records.size() == 5);
  std::vector<Sample> samples;
  for (const auto& r : records) samples.push_back(r.sample);
  const auto gts = ground_truths(samples);
  std::vector<PredictionRecord> preds;
  for (int i = 0; i < 3; ++i) preds.push_back(pred(gts[i].sample_id, gts[i].box));
  const BBox b = gts[3].box;
  preds.push_back(pred(gts[3].sample_id, BBox{b.x1, b.y0, b.x1 + b.width(), b.y1}));  // shifted off the target
  preds.push_back(pred(gts[4].sample_id, BBox{0, 0, 128, 128}, false));
  const EvalResult r = evaluate(preds, gts);
  CHECK(r.n_correct == 3);
  CHECK(r.ap50 == 0.6);
  CHECK(r.n_malformed == 1);
}

TEST_CASE("eval_result.json mirrors the result") {
  const auto h = five_iou_case();
  const EvalResult r = evaluate(h.preds, h.gts);
  const auto path = std::filesystem::temp_directory_path() / "groundseq_eval_result.json";
  write_eval_result(path, r);
  const auto j = nlohmann::json::parse(read_file(path.string()));
  std::filesystem::remove(path);
  CHECK(j.at("n_samples") == 5);
  CHECK(j.at("n_correct") == 3);
  CHECK(j.at("ap50").get<double>() == 0.6);
  CHECK(j.at("per_sample").size() == 5);
  CHECK(j.at("per_sample")[3].at("sample_id") == "s3");
}

TEST_CASE("render_overlay: structure, colours and z-order") {
  GenerateConfig g;
  g.n = 2;
  g.seed = 9;
  const auto ds = generate_dataset(g);
  const Sample& s = ds.samples[0];
  const std::string svg = render_overlay(s, pred(s.sample_id, *s.target_box));
  const auto x = testing::check_xml(svg);
  REQUIRE_MESSAGE(x.well_formed, x.error);
  CHECK(x.root == "svg");
  CHECK(x.element_counts.at("rect") == 2);
  CHECK(x.element_counts.at("image") == 1);
  const auto green = svg.find("stroke=\"green\"");
  const auto red = svg.find("stroke=\"red\"");
  REQUIRE(green != std::string::npos);
  REQUIRE(red != std::string::npos);
  CHECK(green < red);  // prediction drawn on top
  CHECK(svg.find("stroke-width=\"2\"") != std::string::npos);
  CHECK(svg.find("fill=\"none\"") != std::string::npos);
  CHECK(svg.find(s.instruction) != std::string::npos);
  CHECK(svg.find("malformed") == std::string::npos);
}

TEST_CASE("render_overlay: malformed prediction, escaping and missing image") {
  Image img(8, 8, 0.5f);
  const std::string svg = render_overlay(img, "left of <the> \"car\" & co", BBox{1, 1, 4, 4}, pred("x", BBox{0, 0, 8, 8}, false));
  const auto x = testing::check_xml(svg);
  REQUIRE_MESSAGE(x.well_formed, x.error);
  CHECK(svg.find("malformed") != std::string::npos);
  CHECK(svg.find("x=\"0.00\" y=\"0.00\" width=\"32.00\" height=\"32.00\" fill=\"none\" stroke=\"red\"") != std::string::npos);
  CHECK_THROWS_AS(render_overlay(Image{}, "", std::nullopt, pred("y", BBox{0, 0, 1, 1})), MissingImageError);
}

TEST_CASE("encode_png: signature and IHDR dimensions") {
  const auto png = encode_png(Image(5, 3, 0.25f));
  REQUIRE(png.size() > 33);
  CHECK(std::vector<std::uint8_t>(png.begin(), png.begin() + 8) ==
        std::vector<std::uint8_t>{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'});
  CHECK(png[19] == 5);
  CHECK(png[23] == 3);
  CHECK(base64_encode(std::vector<std::uint8_t>{'M', 'a', 'n'}) == "TWFu");
  CHECK(base64_encode(std::vector<std::uint8_t>{'M', 'a'}) == "TWE=");
}

TEST_CASE("leaderboard: bundled fixture reproduces the published ordering") {
  const auto rows = leaderboard_from_json(read_file(fixture("talk2car_leaderboard.json")));
  CHECK(rows.size() == 14);
  const LeaderboardTable t = leaderboard_table(rows);
  CHECK(t.rows == talk2car_leaderboard());
  CHECK(t.rows[0] == LeaderboardRow{"HuBo-VLM", 76.74});
  CHECK(t.rows[1] == LeaderboardRow{"Deformerable-MDETR", 74.4});
  CHECK(t.rows.back() == LeaderboardRow{"STACK-NMN", 33.71});
  for (std::size_t i = 1; i < t.rows.size(); ++i) CHECK(t.rows[i].ap50 <= t.rows[i - 1].ap50);

  const auto j = nlohmann::json::parse(t.json);
  CHECK(j.size() == 14);
  CHECK(leaderboard_from_json(t.json) == t.rows);
  std::istringstream lines(t.text);
  std::string header, rule, first;
  std::getline(lines, header);
  std::getline(lines, rule);
  std::getline(lines, first);
  CHECK(first.rfind("HuBo-VLM", 0) == 0);
  CHECK(first.substr(first.size() - 5) == "76.74");
  CHECK(t.text.find("Stacked VLBert      71\n") != std::string::npos);
}

TEST_CASE("leaderboard: single row, stable ties and range check") {
  CHECK(leaderboard_table({{"solo", 12.5}}).rows == std::vector<LeaderboardRow>{{"solo", 12.5}});
  const auto t = leaderboard_table({{"a", 10}, {"b", 20}, {"c", 10}});
  CHECK(t.rows == std::vector<LeaderboardRow>{{"b", 20}, {"a", 10}, {"c", 10}});
  CHECK_THROWS(leaderboard_table({{"bad", 101}}));
  CHECK_THROWS(leaderboard_from_json("[{\"model\": 3}]"));
  CHECK(format_ap50(71) == "71");
  CHECK(format_ap50(74.4) == "74.4");
  CHECK(format_ap50(60.04) == "60.04");
}
