#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "priorfuse/core/png_io.hpp"
#include "priorfuse/report/benchmark.hpp"
#include "support/images.hpp"
#include "support/tempdir.hpp"

using namespace priorfuse;
using namespace priorfuse::report;
using test_support::TempDir;

namespace {

const fs::path kFixture = fs::path(PRIORFUSE_FIXTURE_DIR) / "published_tables.csv";

PerImageRecord rec(std::string method, std::string dataset, std::string id, std::optional<double> p,
                   std::optional<double> s, std::optional<double> q) {
  PerImageRecord r;
  r.method = std::move(method);
  r.dataset = std::move(dataset);
  r.id = std::move(id);
  r.psnr = p;
  r.ssim = s;
  r.iqa = q;
  return r;
}

std::vector<std::string> cells(const std::string& md_row) {
  std::vector<std::string> out;
  std::stringstream ss(md_row);
  std::string c;
  std::getline(ss, c, '|');
  while (std::getline(ss, c, '|')) {
    const auto a = c.find_first_not_of(' '), b = c.find_last_not_of(' ');
    out.push_back(a == std::string::npos ? "" : c.substr(a, b - a + 1));
  }
  if (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string l; std::getline(ss, l);) out.push_back(l);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct BenchFixture {
  TempDir dir{"report_bench"};
  dataset::DatasetManifest manifest;

  BenchFixture() {
    Rng rng(11);
    manifest.name = "toy";
    manifest.split = dataset::Split::test;
    for (const char* sub : {"gt", "deg"}) fs::create_directories(dir / sub);
    for (int i = 0; i < 5; ++i) {
      const std::string id = "im" + std::to_string(i);
      auto gt = test_support::textured_image(32, 40, rng);
      auto deg = gt;
      for (auto& v : deg.data()) v = std::clamp(v * 0.6f + 0.05f * static_cast<float>(rng.uniform()), 0.0f, 1.0f);
      save_png(gt, dir / "gt" / (id + ".png"));
      save_png(deg, dir / "deg" / (id + ".png"));
      manifest.entries.push_back({id, dir / "deg" / (id + ".png"), dir / "gt" / (id + ".png"), std::nullopt});
    }
  }
};

}  // namespace

TEST(Aggregate, SingleImageEqualsItsMetrics) {
  auto rep = aggregate({rec("m", "d", "a", 21.5, 0.7, 0.4)});
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_EQ(*rep.rows[0].psnr, 21.5);
  EXPECT_EQ(*rep.rows[0].ssim, 0.7);
  EXPECT_EQ(*rep.rows[0].iqa, 0.4);
  EXPECT_EQ(rep.rows[0].n_images, 1u);
}

TEST(Aggregate, MeanOfTwoAndAbsentExcluded) {
  auto rep = aggregate({rec("m", "d", "a", 20, 0.5, std::nullopt), rec("m", "d", "b", 24, 0.7, 0.6)});
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_DOUBLE_EQ(*rep.rows[0].psnr, 22.0);
  EXPECT_DOUBLE_EQ(*rep.rows[0].ssim, 0.6);
  EXPECT_DOUBLE_EQ(*rep.rows[0].iqa, 0.6);
  EXPECT_EQ(rep.rows[0].n_images, 2u);
  EXPECT_EQ(rep.rows[0].n_iqa, 1u);
  EXPECT_THROW(aggregate({}), InvalidArgument);
}

TEST(Aggregate, GroupsInFirstAppearanceOrder) {
  auto rep = aggregate({rec("b", "x", "1", 1, 1, 1), rec("a", "x", "1", 2, 2, 2), rec("b", "y", "1", 3, 3, 3),
                        rec("b", "x", "2", 5, 5, 5)});
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_EQ(rep.rows[0].method, "b");
  EXPECT_EQ(rep.rows[0].dataset, "x");
  EXPECT_DOUBLE_EQ(*rep.rows[0].psnr, 3.0);
  EXPECT_EQ(rep.rows[1].method, "a");
  EXPECT_EQ(rep.rows[2].dataset, "y");
}

TEST(RenderTable, PublishedFixtureOursOHazeCell) {
  const auto rep = read_table_csv(kFixture);
  ASSERT_EQ(rep.rows.size(), 18u);
  const auto md = lines(render_table(rep, Format::markdown));
  const auto header = cells(md[0]);
  const auto col = std::find(header.begin(), header.end(), "O-Haze PSNR↑") - header.begin();
  ASSERT_LT(col, static_cast<long>(header.size()));
  bool seen_ours = false, seen_gpt = false;
  for (std::size_t i = 2; i < md.size(); ++i) {
    const auto c = cells(md[i]);
    if (c[0] == "Ours") {
      EXPECT_EQ(c[col], "22.08");
      seen_ours = true;
    }
    if (c[0] == "GPT-Image") {
      EXPECT_EQ(c[col], "13.13");
      EXPECT_EQ(c[col + 2], "0.757");
      seen_gpt = true;
    }
  }
  EXPECT_TRUE(seen_ours && seen_gpt);
  // 3 methods on rows, 6 datasets x 3 metric columns.
  EXPECT_EQ(md.size(), 2u + 3u);
  EXPECT_EQ(header.size(), 1u + 18u);
}

TEST(RenderTable, AbsentIqaRendersPlaceholder) {
  auto rep = aggregate({rec("m", "d", "a", 20, 0.5, std::nullopt)});
  const auto md = render_table(rep, Format::markdown);
  const auto row = cells(lines(md)[2]);
  EXPECT_EQ(row[3], "—");
  const auto csv = lines(render_table(rep, Format::csv));
  EXPECT_EQ(csv[1], "m,d,20.00,0.500,—,1");
}

TEST(RenderTable, CsvAndMarkdownCarryIdenticalNumbers) {
  const auto rep = read_table_csv(kFixture);
  const auto md = lines(render_table(rep, Format::markdown));
  const auto header = cells(md[0]);
  const auto csv = lines(render_table(rep, Format::csv));
  ASSERT_EQ(csv.size(), 1 + rep.rows.size());
  for (std::size_t i = 1; i < csv.size(); ++i) {
    std::vector<std::string> f;
    std::stringstream ss(csv[i]);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    const std::string& method = f[0];
    const std::string& ds = f[1];
    const auto row = std::find_if(md.begin() + 2, md.end(), [&](const std::string& l) { return cells(l)[0] == method; });
    ASSERT_NE(row, md.end());
    const auto c = cells(*row);
    const auto col = std::find(header.begin(), header.end(), ds + " PSNR↑") - header.begin();
    EXPECT_EQ(c[col], f[2]);
    EXPECT_EQ(c[col + 1], f[3]);
    EXPECT_EQ(c[col + 2], f[4]);
  }
}

TEST(RenderTable, DeterministicAndRoundTripsThroughCsv) {
  const auto rep = read_table_csv(kFixture);
  EXPECT_EQ(render_table(rep, Format::csv), render_table(read_table_csv(kFixture), Format::csv));
  TempDir dir("report_rt");
  write_file(dir / "t.csv", render_table(rep, Format::csv));
  EXPECT_EQ(render_table(read_table_csv(dir / "t.csv"), Format::markdown), render_table(rep, Format::markdown));
  EXPECT_THROW(parse_format("html"), InvalidArgument);
}

TEST(PerImageCsv, RecomputedMeansMatchAggregates) {
  Rng rng(5);
  std::vector<PerImageRecord> recs;
  for (int i = 0; i < 30; ++i) {
    auto r = rec(i % 2 ? "a" : "b", i % 3 ? "x" : "y", std::to_string(i), rng.uniform(10, 40), rng.uniform(0, 1),
                 i % 4 ? std::optional<double>(rng.uniform(0, 1)) : std::nullopt);
    r.notes = "note, with comma";
    recs.push_back(r);
  }
  const auto rep = aggregate(recs);
  TempDir dir("report_pi");
  write_file(dir / "per_image.csv", per_image_csv(recs));
  const auto back = aggregate(read_per_image_csv(dir / "per_image.csv"));
  ASSERT_EQ(back.rows.size(), rep.rows.size());
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    EXPECT_NEAR(*back.rows[i].psnr, *rep.rows[i].psnr, 1e-9);
    EXPECT_NEAR(*back.rows[i].ssim, *rep.rows[i].ssim, 1e-9);
    EXPECT_NEAR(*back.rows[i].iqa, *rep.rows[i].iqa, 1e-9);
    EXPECT_EQ(back.rows[i].n_iqa, rep.rows[i].n_iqa);
  }
}

TEST(Benchmark, GroundTruthAsPredictionHitsTheCap) {
  BenchFixture f;
  auto res = run_benchmark({f.manifest}, {{"oracle", f.dir / "gt"}});
  EXPECT_EQ(res.exit_status(), 0);
  ASSERT_EQ(res.report.rows.size(), 1u);
  EXPECT_EQ(*res.report.rows[0].psnr, 100.0);
  EXPECT_EQ(*res.report.rows[0].ssim, 1.0);
  for (const auto& r : res.report.per_image) {
    EXPECT_EQ(r.shift_dy, 0);
    EXPECT_EQ(r.shift_dx, 0);
    EXPECT_EQ(*r.aspect_ratio_delta, 0.0);
    EXPECT_FALSE(r.iqa.has_value());
    EXPECT_FALSE(r.divergence_flag.has_value());
  }
}

TEST(Benchmark, DegradedAsPredictionReproducesReferenceRow) {
  BenchFixture f;
  metrics::IqaScorer iqa(std::make_shared<metrics::ConstantIqaProvider>(0.5));
  BenchOptions o;
  o.iqa = &iqa;
  auto res = run_benchmark({f.manifest}, {{"degraded", f.dir / "deg"}}, o);
  double mean = 0;
  for (const auto& e : f.manifest.entries) mean += metrics::psnr(load_png(e.degraded), load_png(*e.gt));
  mean /= 5;
  EXPECT_NEAR(*res.report.rows[0].psnr, mean, 1e-12);
  for (const auto& r : res.report.per_image) {
    ASSERT_TRUE(r.divergence_flag.has_value());
    EXPECT_FALSE(*r.divergence_flag);  // equal PSNR and equal IQA
    EXPECT_EQ(*r.iqa, 0.5);
  }
}

TEST(Benchmark, ThreeMethodsFiveImagesCardinalityAndFiles) {
  BenchFixture f;
  fs::create_directories(f.dir / "shifted");
  for (const auto& e : f.manifest.entries) {
    auto gt = load_png(*e.gt);
    save_png(test_support::circular_shift(gt, 2, -3), f.dir / "shifted" / (e.id + ".png"));
  }
  auto res = run_benchmark({f.manifest}, {{"gt", f.dir / "gt"}, {"deg", f.dir / "deg"}, {"shifted", f.dir / "shifted"}});
  EXPECT_EQ(res.report.rows.size(), 3u);
  EXPECT_EQ(res.report.per_image.size(), 15u);
  for (const auto& r : res.report.per_image)
    if (r.method == "shifted") {
      EXPECT_EQ(*r.shift_dy, 2);
      EXPECT_EQ(*r.shift_dx, -3);
    }
  TempDir out("report_out");
  write_report(res.report, out.path());
  for (const char* name : {"report.csv", "report.md", "per_image.csv", "plots/toy.svg"})
    EXPECT_TRUE(fs::exists(out / name)) << name;
  EXPECT_NE(slurp(out / "plots/toy.svg").find("<svg"), std::string::npos);

  auto again = run_benchmark({f.manifest}, {{"gt", f.dir / "gt"}, {"deg", f.dir / "deg"}, {"shifted", f.dir / "shifted"}});
  EXPECT_EQ(per_image_csv(again.report.per_image), per_image_csv(res.report.per_image));
  EXPECT_EQ(render_table(again.report, Format::csv), render_table(res.report, Format::csv));
}

TEST(Benchmark, MissingPredictionIsAbsentAndStatusNonzero) {
  BenchFixture f;
  fs::create_directories(f.dir / "partial");
  for (std::size_t i = 0; i < 3; ++i)
    fs::copy_file(*f.manifest.entries[i].gt, f.dir / "partial" / (f.manifest.entries[i].id + ".png"));
  auto res = run_benchmark({f.manifest}, {{"partial", f.dir / "partial"}});
  EXPECT_EQ(res.missing_predictions, 2u);
  EXPECT_NE(res.exit_status(), 0);
  EXPECT_EQ(res.report.rows[0].n_images, 5u);
  EXPECT_EQ(res.report.rows[0].n_psnr, 3u);
  EXPECT_EQ(*res.report.rows[0].psnr, 100.0);
  int absent = 0;
  for (const auto& r : res.report.per_image)
    if (!r.prediction_found) {
      ++absent;
      EXPECT_FALSE(r.psnr || r.ssim || r.iqa);
    }
  EXPECT_EQ(absent, 2);
}

TEST(Benchmark, ResizedPredictionReportsAspectDrift) {
  BenchFixture f;
  fs::create_directories(f.dir / "square");
  for (const auto& e : f.manifest.entries)
    save_png(resize_bilinear(load_png(*e.gt), 40, 40), f.dir / "square" / (e.id + ".png"));
  auto res = run_benchmark({f.manifest}, {{"square", f.dir / "square"}});
  for (const auto& r : res.report.per_image) {
    // input 32x40 (ratio 1.25), prediction 40x40 (ratio 1)
    EXPECT_NEAR(*r.aspect_ratio_delta, 0.2, 1e-12);
    EXPECT_NE(r.notes.find("aspect ratio changed"), std::string::npos);
    EXPECT_NE(r.notes.find("resized from 40x40"), std::string::npos);
  }
}
