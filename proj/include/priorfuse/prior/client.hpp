#pragma once

#include <chrono>
#include <condition_variable>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <string>
#include <thread>

#include <json.hpp>

#include "priorfuse/core/hash.hpp"
#include "priorfuse/core/png_io.hpp"
#include "priorfuse/prior/prompt.hpp"

namespace priorfuse::prior {

namespace fs = std::filesystem;

class ProviderError : public Error {
 public:
  ProviderError(const std::string& provider, const std::string& message)
      : Error("provider '" + provider + "' failed: " + message), provider_message_(message) {}
  const std::string& provider_message() const noexcept { return provider_message_; }

 private:
  std::string provider_message_;
};

class ProviderTimeout : public Error {
 public:
  ProviderTimeout(const std::string& provider, double elapsed)
      : Error("provider '" + provider + "' timed out after " + std::to_string(elapsed) + " s"), elapsed_(elapsed) {}
  double elapsed() const noexcept { return elapsed_; }

 private:
  double elapsed_;
};

class UndecodableOutput : public Error {
 public:
  using Error::Error;
};

// One call: image + prompt in, encoded image bytes out. Throws on failure.
class ProviderAdapter {
 public:
  virtual ~ProviderAdapter() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::uint8_t> generate(const ImageBuffer& image, const std::string& prompt) = 0;
};

// Echoes the input; useful for plumbing tests and as a no-prior control.
class IdentityAdapter final : public ProviderAdapter {
 public:
  std::string name() const override { return "identity"; }
  std::vector<std::uint8_t> generate(const ImageBuffer& image, const std::string&) override { return encode_png(image); }
};

struct PriorRequest {
  ImageBuffer image;
  DegradationType degradation{DegradationType::haze};
  std::string prompt;
  std::string provider;
  std::string request_id;
};

inline std::string compute_request_id(const ImageBuffer& image, const std::string& prompt, const std::string& provider) {
  Sha256 h;
  h.field("priorfuse.prior.v1").image(image).field(prompt).field(provider);
  return h.hex();
}

inline PriorRequest make_request(ImageBuffer image, DegradationType degradation, std::string provider,
                                 std::optional<std::string> prompt_override = std::nullopt) {
  PriorRequest r;
  r.image = std::move(image);
  r.degradation = degradation;
  r.prompt = prompt_override ? *prompt_override : render_prompt(degradation);
  r.provider = std::move(provider);
  r.request_id = compute_request_id(r.image, r.prompt, r.provider);
  return r;
}

struct PriorResult {
  ImageBuffer prior;
  std::pair<int, int> raw_dims{0, 0};  // (height, width) as returned by the provider
  std::string provider;
  double latency{0.0};
  bool from_cache{false};
};

struct ClientConfig {
  fs::path cache_dir{"prior_cache"};
  int max_in_flight{2};
  double requests_per_minute{60.0};  // <= 0 disables the bucket
  double timeout_seconds{300.0};
};

namespace detail {

inline void write_atomic(const fs::path& path, const void* data, std::size_t n) {
  fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp." + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write " + tmp);
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!f) throw IoError("short write to " + tmp);
  }
  fs::rename(tmp, path);
}

class TokenBucket {
 public:
  explicit TokenBucket(double per_minute) : rate_(per_minute / 60.0), capacity_(std::max(1.0, per_minute / 60.0)), tokens_(capacity_) {}

  void take() {
    if (rate_ <= 0) return;
    std::unique_lock lock(mu_);
    for (;;) {
      refill();
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      const double wait = (1.0 - tokens_) / rate_;
      lock.unlock();
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      lock.lock();
    }
  }

 private:
  void refill() {
    const auto now = std::chrono::steady_clock::now();
    tokens_ = std::min(capacity_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_);
    last_ = now;
  }
  double rate_;
  double capacity_;
  double tokens_;
  std::chrono::steady_clock::time_point last_{std::chrono::steady_clock::now()};
  std::mutex mu_;
};

}  // namespace detail

class PriorClient {
 public:
  explicit PriorClient(ClientConfig cfg)
      : cfg_(std::move(cfg)), slots_(std::max(1, cfg_.max_in_flight)), bucket_(cfg_.requests_per_minute) {
    if (cfg_.max_in_flight < 1) throw InvalidArgument("max_in_flight must be at least 1");
  }

  void register_adapter(std::shared_ptr<ProviderAdapter> adapter) {
    std::lock_guard lock(mu_);
    adapters_[adapter->name()] = std::move(adapter);
  }

  bool has_adapter(const std::string& name) const {
    std::lock_guard lock(mu_);
    return adapters_.count(name) > 0;
  }

  fs::path cache_path(const PriorRequest& req) const { return cfg_.cache_dir / req.provider / (req.request_id + ".png"); }

  std::size_t provider_calls() const { return provider_calls_; }

  PriorResult acquire(const PriorRequest& req) {
    auto id_lock = lock_for(req.request_id);
    std::lock_guard guard(*id_lock);
    if (auto hit = read_cache(req)) return *hit;

    std::shared_ptr<ProviderAdapter> adapter;
    {
      std::lock_guard lock(mu_);
      auto it = adapters_.find(req.provider);
      if (it == adapters_.end()) throw InvalidArgument("no adapter registered for provider '" + req.provider + "'");
      adapter = it->second;
    }

    bucket_.take();
    slots_.acquire();
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::uint8_t> bytes;
    try {
      bytes = call_with_timeout(adapter, req);
    } catch (...) {
      slots_.release();
      throw;
    }
    slots_.release();
    const double latency = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    ImageBuffer raw;
    try {
      raw = decode_png(bytes, req.image.channels());
    } catch (const std::exception& e) {
      throw UndecodableOutput("provider '" + req.provider + "' returned undecodable output: " + e.what());
    }
    PriorResult res;
    res.raw_dims = {raw.height(), raw.width()};
    // Stretch to the request frame; quantise so a cache hit is bit-identical.
    res.prior = quantize8(resize_bilinear(raw, req.image.height(), req.image.width()));
    res.provider = req.provider;
    res.latency = latency;
    res.from_cache = false;
    write_cache(req, res);
    return res;
  }

 private:
  std::shared_ptr<std::mutex> lock_for(const std::string& id) {
    std::lock_guard lock(mu_);
    auto& m = id_locks_[id];
    if (!m) m = std::make_shared<std::mutex>();
    return m;
  }

  std::vector<std::uint8_t> call_with_timeout(const std::shared_ptr<ProviderAdapter>& adapter, const PriorRequest& req) {
    ++provider_calls_;
    auto promise = std::make_shared<std::promise<std::vector<std::uint8_t>>>();
    auto future = promise->get_future();
    const auto start = std::chrono::steady_clock::now();
    // Detached so a hung provider cannot block the caller past the timeout.
    std::thread([adapter, promise, image = req.image, prompt = req.prompt] {
      try {
        promise->set_value(adapter->generate(image, prompt));
      } catch (...) {
        promise->set_exception(std::current_exception());
      }
    }).detach();
    if (future.wait_for(std::chrono::duration<double>(cfg_.timeout_seconds)) != std::future_status::ready) {
      throw ProviderTimeout(req.provider, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    try {
      return future.get();
    } catch (const ProviderError&) {
      throw;
    } catch (const std::exception& e) {
      throw ProviderError(req.provider, e.what());
    }
  }

  std::optional<PriorResult> read_cache(const PriorRequest& req) const {
    const auto png = cache_path(req);
    auto sidecar = png;
    sidecar.replace_extension(".json");
    if (!fs::exists(png) || !fs::exists(sidecar)) return std::nullopt;
    std::ifstream f(sidecar);
    nlohmann::json meta = nlohmann::json::parse(f);
    PriorResult res;
    res.prior = load_png(png, req.image.channels());
    if (!res.prior.same_shape(req.image)) return std::nullopt;
    res.raw_dims = {meta.at("raw_dims").at(0).get<int>(), meta.at("raw_dims").at(1).get<int>()};
    res.provider = req.provider;
    res.latency = meta.value("latency", 0.0);
    res.from_cache = true;
    return res;
  }

  void write_cache(const PriorRequest& req, const PriorResult& res) const {
    const auto png = cache_path(req);
    auto sidecar = png;
    sidecar.replace_extension(".json");
    const auto bytes = encode_png(res.prior);
    nlohmann::json meta{{"prompt", req.prompt},
                        {"raw_dims", {res.raw_dims.first, res.raw_dims.second}},
                        {"latency", res.latency},
                        {"timestamp", static_cast<std::int64_t>(std::time(nullptr))}};
    const auto text = meta.dump(2);
    // Image first: a sidecar only ever points at a complete image.
    detail::write_atomic(png, bytes.data(), bytes.size());
    detail::write_atomic(sidecar, text.data(), text.size());
  }

  ClientConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<ProviderAdapter>> adapters_;
  std::map<std::string, std::shared_ptr<std::mutex>> id_locks_;
  std::counting_semaphore<> slots_;
  detail::TokenBucket bucket_;
  std::atomic<std::size_t> provider_calls_{0};
};

}  // namespace priorfuse::prior
