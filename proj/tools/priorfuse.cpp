// priorfuse command-line front end.
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "priorfuse/core/png_io.hpp"
#include "priorfuse/dataset/manifest.hpp"
#include "priorfuse/dataset/synthetic_task.hpp"
#include "priorfuse/fidelity/analyzer.hpp"
#include "priorfuse/prior/client.hpp"
#include "priorfuse/prior/http_adapter.hpp"
#include "priorfuse/prior/synthetic.hpp"
#include "priorfuse/report/benchmark.hpp"
#include "priorfuse/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace priorfuse;
using nlohmann::json;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  fs::path cache{"prior_cache"};
  fs::path config;
};

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open config " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("config " + p.string() + ": " + e.what());
  }
}

json global_config(const Globals& g) { return g.config.empty() ? json::object() : read_json_file(g.config); }

// Looks up the ground truth of a degraded image by content hash, so the
// offline prior goes through the same client, cache and request ids as a
// real provider.
class OfflineGtAdapter final : public prior::ProviderAdapter {
 public:
  explicit OfflineGtAdapter(prior::SyntheticPriorConfig cfg) : cfg_(cfg) {}
  std::string name() const override { return "offline-gt"; }
  void add(const ImageBuffer& degraded, ImageBuffer gt, std::uint64_t index) {
    table_[image_hash(degraded)] = {std::move(gt), index};
  }
  std::vector<std::uint8_t> generate(const ImageBuffer& image, const std::string&) override {
    auto it = table_.find(image_hash(image));
    if (it == table_.end()) throw prior::ProviderError(name(), "no ground truth registered for this input");
    return encode_png(prior::synthesize_offline_prior(it->second.first, cfg_, it->second.second));
  }

 private:
  prior::SyntheticPriorConfig cfg_;
  std::map<std::string, std::pair<ImageBuffer, std::uint64_t>> table_;
};

std::string format_g(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_dataset_validate(const fs::path& manifest, bool require_priors) {
  dataset::ManifestCheck check;
  check.require_priors = require_priors;
  try {
    const auto m = dataset::load_manifest(manifest, check);
    std::size_t with_prior = 0;
    for (const auto& e : m.entries) with_prior += e.prior.has_value();
    std::cout << m.name << " (" << to_string(m.degradation) << ", " << dataset::to_string(m.split) << "): "
              << m.size() << " entries, " << with_prior << " with priors\n";
    return 0;
  } catch (const dataset::ManifestError& e) {
    for (const auto& p : e.problems()) std::cerr << "error: " << p << "\n";
    return 2;
  }
}

int cmd_dataset_synth(const Globals& g, const fs::path& out, int count, int train_count, int size) {
  dataset::DeskTaskConfig dc;
  dc.count = count;
  dc.train_count = train_count;
  dc.size = size;
  if (g.seed) dc.seed = dc.prior.seed = RandomSeed{*g.seed};
  const auto task = dataset::write_desk_task(out, dc);
  std::cout << "wrote " << task.train.size() << " train and " << task.test.size() << " test triplets to " << out << "\n";
  return 0;
}

int cmd_acquire(const Globals& g, const fs::path& manifest_path, const std::string& provider_in, bool offline,
                const std::string& base_url, fs::path out_manifest) {
  auto m = dataset::load_manifest(manifest_path);
  const auto cfgj = global_config(g);
  prior::ClientConfig cc;
  cc.cache_dir = g.cache;
  cc.max_in_flight = cfgj.value("max_in_flight", cc.max_in_flight);
  cc.requests_per_minute = cfgj.value("requests_per_minute", cc.requests_per_minute);
  cc.timeout_seconds = cfgj.value("timeout_seconds", cc.timeout_seconds);
  prior::PriorClient client(cc);

  std::string provider = provider_in;
  std::shared_ptr<OfflineGtAdapter> offline_adapter;
  if (offline) {
    prior::SyntheticPriorConfig sp;
    if (g.seed) sp.seed = RandomSeed{*g.seed};
    sp.max_translation = cfgj.value("max_translation", sp.max_translation);
    sp.max_scale_delta = cfgj.value("max_scale_delta", sp.max_scale_delta);
    sp.color_jitter = cfgj.value("color_jitter", sp.color_jitter);
    offline_adapter = std::make_shared<OfflineGtAdapter>(sp);
    client.register_adapter(offline_adapter);
    provider = offline_adapter->name();
  } else if (provider == "identity") {
    client.register_adapter(std::make_shared<prior::IdentityAdapter>());
  } else {
    prior::HttpAdapterConfig hc;
    hc.name = provider;
    hc.base_url = base_url.empty() ? cfgj.value("base_url", std::string()) : base_url;
    hc.path = cfgj.value("path", hc.path);
    hc.timeout_seconds = cc.timeout_seconds;
    if (hc.base_url.empty()) throw InvalidArgument("provider '" + provider + "' needs --base-url (or base_url in --config)");
    client.register_adapter(std::make_shared<prior::HttpAdapter>(hc));
  }

  int failures = 0;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    auto& e = m.entries[i];
    const auto deg = load_png(e.degraded, 3);
    if (offline_adapter) {
      if (!e.gt) throw InvalidArgument("--offline-from-gt: entry '" + e.id + "' has no ground truth");
      offline_adapter->add(deg, load_png(*e.gt, 3), i);
    }
    const auto req = prior::make_request(deg, m.degradation, provider);
    try {
      const auto res = client.acquire(req);
      e.prior = fs::absolute(client.cache_path(req));
      std::cout << e.id << ": " << (res.from_cache ? "cached" : "acquired") << " raw " << res.raw_dims.first << "x"
                << res.raw_dims.second << " in " << format_g(res.latency, 2) << " s\n";
    } catch (const Error& err) {
      ++failures;
      std::cerr << e.id << ": " << err.what() << "\n";
    }
  }
  if (out_manifest.empty()) {
    out_manifest = manifest_path;
    out_manifest.replace_extension(".priors.jsonl");
  }
  dataset::save_manifest(m, out_manifest);
  std::cout << "manifest with priors: " << out_manifest.string() << "\n";
  return failures == 0 ? 0 : 2;
}

int cmd_train(const Globals& g, const fs::path& manifest_path, const fs::path& val_manifest, const std::string& fusion,
              const fs::path& out, bool resume, std::optional<long long> iterations) {
  auto cfg = train::TrainConfig::from_json(global_config(g));
  if (!fusion.empty()) cfg.fusion_mode = train::parse_fusion_mode(fusion);
  if (g.seed) cfg.seed = RandomSeed{*g.seed};
  if (iterations) cfg.iterations = *iterations;
  const auto m = dataset::load_manifest(manifest_path);
  train::RunOptions opts;
  opts.resume = resume;
  if (!val_manifest.empty()) opts.validation = dataset::load_manifest(val_manifest);
  double window = 0;
  int n = 0;
  opts.on_step = [&](long long k, double loss) {
    window += loss;
    ++n;
    if ((k + 1) % 100 == 0 || k + 1 == cfg.iterations) {
      std::cout << "iter " << k + 1 << "/" << cfg.iterations << " loss " << format_g(window / n, 6) << "\n" << std::flush;
      window = 0;
      n = 0;
    }
  };
  opts.on_validate = [](long long k, double v) { std::cout << "val @" << k << " psnr " << format_g(v, 3) << "\n"; };
  const auto st = train::run_training<float>(m, cfg, out, opts);
  std::cout << "done at iteration " << st.iteration << "; outputs in " << out.string() << "\n";
  return 0;
}

int cmd_restore(const fs::path& checkpoint, const fs::path& manifest_path, const fs::path& out_dir) {
  const auto model = train::load_model<float>(checkpoint);
  const auto m = dataset::load_manifest(manifest_path);
  fs::create_directories(out_dir);
  for (const auto& e : m.entries) {
    const auto deg = load_png(e.degraded, 3);
    std::optional<ImageBuffer> pri;
    if (model.reads_prior()) {
      if (!e.prior) throw InvalidArgument("entry '" + e.id + "' has no prior; this checkpoint needs one");
      pri = resize_bilinear(load_png(*e.prior, 3), deg.height(), deg.width());
    }
    save_png(model.restore(deg, pri ? &*pri : nullptr), out_dir / (e.id + ".png"));
  }
  std::cout << "restored " << m.size() << " images into " << out_dir.string() << "\n";
  return 0;
}

std::optional<metrics::IqaScorer> make_iqa(std::optional<double> constant) {
  if (!constant) return std::nullopt;
  return std::optional<metrics::IqaScorer>(std::in_place, std::make_shared<metrics::ConstantIqaProvider>(*constant));
}

int cmd_eval(const fs::path& manifest_path, const fs::path& pred_dir, const std::string& metric_list,
             const std::string& method, const fs::path& out, std::optional<double> iqa_constant) {
  bool want_psnr = false, want_ssim = false, want_iqa = false;
  std::stringstream ss(metric_list);
  for (std::string t; std::getline(ss, t, ',');) {
    if (t == "psnr") want_psnr = true;
    else if (t == "ssim") want_ssim = true;
    else if (t == "iqa") want_iqa = true;
    else throw InvalidArgument("unknown metric '" + t + "' (psnr,ssim,iqa)");
  }
  auto iqa = want_iqa ? make_iqa(iqa_constant) : std::nullopt;
  if (want_iqa && !iqa) std::cerr << "warning: no IQA provider configured; the iqa column stays empty\n";
  report::BenchOptions bo;
  bo.iqa = iqa ? &*iqa : nullptr;
  auto res = report::run_benchmark({dataset::load_manifest(manifest_path)}, {{method, pred_dir}}, bo);
  for (auto& r : res.report.per_image) {
    if (!want_psnr) r.psnr.reset();
    if (!want_ssim) r.ssim.reset();
  }
  res.report = report::aggregate(res.report.per_image);
  report::write_file(out, report::render_table(res.report, report::Format::csv));
  report::write_file(out.parent_path() / "per_image.csv", report::per_image_csv(res.report.per_image));
  std::cout << report::render_table(res.report, report::Format::markdown);
  if (res.missing_predictions) std::cerr << res.missing_predictions << " prediction(s) missing\n";
  return res.exit_status();
}

int cmd_analyze(const fs::path& manifest_path, const fs::path& prior_dir, const fs::path& out) {
  const auto m = dataset::load_manifest(manifest_path);
  std::ostringstream csv;
  csv << "id,input_h,input_w,prior_h,prior_w,aspect_ratio_delta,shift_dy,shift_dx,shift_confidence,notes\n";
  int flagged = 0;
  for (const auto& e : m.entries) {
    fs::path p = prior_dir.empty() ? (e.prior ? *e.prior : fs::path()) : prior_dir / (e.id + ".png");
    if (p.empty() || !fs::exists(p)) {
      std::cerr << e.id << ": no prior\n";
      csv << e.id << ",,,,,,,,,missing prior\n";
      continue;
    }
    const auto deg = load_png(e.degraded, 3);
    const auto raw = load_png(p, 3);
    std::pair<int, int> raw_dims{raw.height(), raw.width()};
    // The prior cache stores normalised images; the provider's size is in the sidecar.
    if (auto side = fs::path(p).replace_extension(".json"); fs::exists(side)) {
      const auto j = read_json_file(side);
      if (j.contains("raw_dims")) raw_dims = {j["raw_dims"][0].get<int>(), j["raw_dims"][1].get<int>()};
    }
    const auto pri = resize_bilinear(raw, deg.height(), deg.width());
    fidelity::AnalysisInput in;
    in.input_dims = {deg.height(), deg.width()};
    in.raw_prior_dims = raw_dims;
    in.reference = &deg;
    in.prior = &pri;
    const auto r = fidelity::analyze(in);
    flagged += !r.notes.empty();
    csv << e.id << "," << deg.height() << "," << deg.width() << "," << raw_dims.first << "," << raw_dims.second << ","
        << format_g(r.aspect_ratio_delta, 6) << "," << r.translation.dy << "," << r.translation.dx << ","
        << format_g(r.translation.confidence, 6) << ",\"" << r.notes << "\"\n";
  }
  if (out.empty()) {
    std::cout << csv.str();
  } else {
    report::write_file(out, csv.str());
  }
  std::cerr << flagged << " of " << m.size() << " priors flagged\n";
  return 0;
}

int cmd_bench(const std::vector<std::string>& manifests, const std::vector<std::string>& methods, const fs::path& out,
              std::optional<double> iqa_constant) {
  std::vector<dataset::DatasetManifest> ms;
  for (const auto& p : manifests) ms.push_back(dataset::load_manifest(p));
  std::vector<report::MethodSpec> specs;
  for (const auto& m : methods) {
    const auto eq = m.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidArgument("--method expects NAME=DIR, got '" + m + "'");
    specs.push_back({m.substr(0, eq), m.substr(eq + 1)});
  }
  auto iqa = make_iqa(iqa_constant);
  report::BenchOptions bo;
  bo.iqa = iqa ? &*iqa : nullptr;
  const auto res = report::run_benchmark(ms, specs, bo);
  report::write_report(res.report, out);
  std::cout << report::render_table(res.report, report::Format::markdown);
  if (res.missing_predictions) std::cerr << res.missing_predictions << " prediction(s) missing\n";
  return res.exit_status();
}

int cmd_report(const fs::path& table, const fs::path& per_image, const std::string& format, const fs::path& out) {
  report::EvalReport rep;
  if (!per_image.empty()) {
    rep = report::aggregate(report::read_per_image_csv(per_image));
  } else if (!table.empty()) {
    rep = report::read_table_csv(table);
  } else {
    throw InvalidArgument("report needs --table or --per-image");
  }
  const auto text = report::render_table(rep, report::parse_format(format));
  if (out.empty()) {
    std::cout << text;
  } else {
    report::write_file(out, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"priorfuse: generative priors for image restoration"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed (overrides the config)");
  app.add_option("--cache", g.cache, "Prior cache directory")->capture_default_str();
  app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);

  int status = 0;

  auto* ds = app.add_subcommand("dataset", "Dataset manifests");
  ds->require_subcommand(1);
  auto* dv = ds->add_subcommand("validate", "Check a manifest and the files it references");
  fs::path dv_manifest;
  bool dv_priors = false;
  dv->add_option("--manifest", dv_manifest)->required();
  dv->add_flag("--require-priors", dv_priors);
  dv->callback([&] { status = cmd_dataset_validate(dv_manifest, dv_priors); });
  auto* dsy = ds->add_subcommand("synth", "Write the synthetic desk task (gt, degraded, offline priors)");
  fs::path sy_out;
  int sy_count = 24, sy_train = 18, sy_size = 96;
  dsy->add_option("--out", sy_out)->required();
  dsy->add_option("--count", sy_count)->capture_default_str();
  dsy->add_option("--train-count", sy_train)->capture_default_str();
  dsy->add_option("--size", sy_size)->capture_default_str();
  dsy->callback([&] { status = cmd_dataset_synth(g, sy_out, sy_count, sy_train, sy_size); });

  auto* ac = app.add_subcommand("acquire", "Fetch priors through a provider into the cache");
  fs::path ac_manifest, ac_out;
  std::string ac_provider = "identity", ac_url;
  bool ac_offline = false;
  ac->add_option("--manifest", ac_manifest)->required();
  ac->add_option("--provider", ac_provider, "identity | <name> (HTTP adapter)")->capture_default_str();
  ac->add_option("--base-url", ac_url, "HTTP provider base URL");
  ac->add_flag("--offline-from-gt", ac_offline, "Synthesise priors from ground truth instead of calling a provider");
  ac->add_option("--out-manifest", ac_out, "Defaults to <manifest>.priors.jsonl");
  ac->callback([&] { status = cmd_acquire(g, ac_manifest, ac_provider, ac_offline, ac_url, ac_out); });

  auto* tr = app.add_subcommand("train", "Train a restoration model");
  fs::path tr_manifest, tr_val, tr_out;
  std::string tr_fusion;
  bool tr_resume = false;
  std::optional<long long> tr_iters;
  tr->add_option("--manifest", tr_manifest, "Train-split manifest")->required();
  tr->add_option("--val-manifest", tr_val, "Test-split manifest for validation PSNR");
  tr->add_option("--fusion", tr_fusion)->check(CLI::IsMember({"baseline", "concat", "aligned"}));
  tr->add_option("--iterations", tr_iters);
  tr->add_option("--out", tr_out)->required();
  tr->add_flag("--resume", tr_resume);
  tr->callback([&] { status = cmd_train(g, tr_manifest, tr_val, tr_fusion, tr_out, tr_resume, tr_iters); });

  auto* rs = app.add_subcommand("restore", "Run a trained checkpoint over a manifest");
  fs::path rs_ckpt, rs_manifest, rs_out;
  rs->add_option("--checkpoint", rs_ckpt)->required()->check(CLI::ExistingFile);
  rs->add_option("--manifest", rs_manifest)->required();
  rs->add_option("--out-dir", rs_out)->required();
  rs->callback([&] { status = cmd_restore(rs_ckpt, rs_manifest, rs_out); });

  auto* ev = app.add_subcommand("eval", "Score predictions against ground truth");
  fs::path ev_manifest, ev_pred, ev_out = "report.csv";
  std::string ev_metrics = "psnr,ssim", ev_method = "method";
  std::optional<double> ev_iqa;
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--pred-dir", ev_pred)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--metrics", ev_metrics)->capture_default_str();
  ev->add_option("--method", ev_method)->capture_default_str();
  ev->add_option("--iqa-constant", ev_iqa, "Use the constant stub IQA provider");
  ev->add_option("--out", ev_out)->capture_default_str();
  ev->callback([&] { status = cmd_eval(ev_manifest, ev_pred, ev_metrics, ev_method, ev_out, ev_iqa); });

  auto* an = app.add_subcommand("analyze", "Fidelity checks of priors against their inputs");
  fs::path an_manifest, an_prior, an_out;
  an->add_option("--manifest", an_manifest)->required();
  an->add_option("--prior-dir", an_prior, "Directory of <id>.png priors (default: manifest prior paths)");
  an->add_option("--out", an_out, "CSV output (default stdout)");
  an->callback([&] { status = cmd_analyze(an_manifest, an_prior, an_out); });

  auto* bn = app.add_subcommand("bench", "Evaluate several methods over several manifests");
  std::vector<std::string> bn_manifests, bn_methods;
  fs::path bn_out;
  std::optional<double> bn_iqa;
  bn->add_option("--manifest", bn_manifests)->required();
  bn->add_option("--method", bn_methods, "NAME=PRED_DIR, repeatable")->required();
  bn->add_option("--iqa-constant", bn_iqa);
  bn->add_option("--out", bn_out)->required();
  bn->callback([&] { status = cmd_bench(bn_manifests, bn_methods, bn_out, bn_iqa); });

  auto* rp = app.add_subcommand("report", "Render a results table");
  fs::path rp_table, rp_per_image, rp_out;
  std::string rp_format = "markdown";
  rp->add_option("--table", rp_table, "Aggregate CSV (method,dataset,psnr,ssim,clip_iqa)");
  rp->add_option("--per-image", rp_per_image, "per_image.csv to aggregate");
  rp->add_option("--format", rp_format)->check(CLI::IsMember({"csv", "markdown", "md"}))->capture_default_str();
  rp->add_option("--out", rp_out);
  rp->callback([&] { status = cmd_report(rp_table, rp_per_image, rp_format, rp_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return status;
}
