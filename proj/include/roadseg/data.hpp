#pragma once

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_set>
#include <variant>
#include <vector>

#include "roadseg/augment.hpp"
#include "roadseg/image.hpp"
#include "roadseg/model.hpp"

namespace roadseg {

struct SamplePair {
  std::string id;
  Image image; // RGB
  Mask mask;
};

struct DatasetSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> holdout_ids;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.25;
};

/// Channel-first float batch; images in [0, 1], masks in {0, 1}.
struct Batch {
  Tensor<float> images; // N x 3 x S x S
  Tensor<float> masks;  // N x 1 x S x S
};

/// Reads an image and its grayscale mask; mask pixels >= threshold are road.
inline SamplePair load_pair(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                            std::uint8_t threshold = 128) {
  SamplePair pair;
  pair.id = image_path.stem().string();
  try {
    pair.image = to_rgb(read_image(image_path));
  } catch (const FormatError& e) {
    throw FormatError(std::string("image ") + image_path.string() + ": " + e.what());
  }
  Image gray;
  try {
    gray = read_image(mask_path);
  } catch (const FormatError& e) {
    throw FormatError(std::string("mask ") + mask_path.string() + ": " + e.what());
  }
  if (gray.height != pair.image.height || gray.width != pair.image.width)
    throw PairingError("image " + image_path.string() + " is " + std::to_string(pair.image.height) + "x" +
                       std::to_string(pair.image.width) + " but mask " + mask_path.string() + " is " +
                       std::to_string(gray.height) + "x" + std::to_string(gray.width));
  pair.mask = binarize_gray(gray, threshold);
  return pair;
}

/// Seeded shuffle, then the first round(fraction * n) ids (half rounds up)
/// become the holdout. Both lists keep the input order.
inline DatasetSplit split_dataset(const std::vector<std::string>& ids, double fraction, std::uint64_t seed) {
  if (ids.empty()) throw ConfigError("split_dataset: no ids to split");
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ConfigError("split_dataset: holdout fraction must be in (0, 1), got " + std::to_string(fraction));
  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i)
    std::swap(order[i], order[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i)))]);
  const auto holdout_n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ids.size()) + 0.5));
  std::vector<bool> in_holdout(ids.size(), false);
  for (std::size_t k = 0; k < holdout_n; ++k) in_holdout[order[k]] = true;
  DatasetSplit split;
  split.seed = seed;
  split.holdout_fraction = fraction;
  for (std::size_t i = 0; i < ids.size(); ++i) (in_holdout[i] ? split.holdout_ids : split.train_ids).push_back(ids[i]);
  return split;
}

inline void write_split_manifest(const DatasetSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write split manifest " + path.string());
  for (const auto& id : split.train_ids) out << "train " << id << '\n';
  for (const auto& id : split.holdout_ids) out << "holdout " << id << '\n';
  if (!out) throw IoError("failed writing split manifest " + path.string());
}

inline DatasetSplit read_split_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read split manifest " + path.string());
  DatasetSplit split;
  std::string kind, id;
  while (in >> kind >> id) {
    if (kind == "train")
      split.train_ids.push_back(id);
    else if (kind == "holdout")
      split.holdout_ids.push_back(id);
    else
      throw FormatError("split manifest " + path.string() + ": unknown entry kind '" + kind + "'");
  }
  return split;
}

/// Image tensor 1 x C x H x W with values u8 / 255.
inline Tensor<float> image_to_tensor(const Image& img) {
  Buffer<float> data(img.pixels.size());
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < img.channels; ++c)
      data[static_cast<std::size_t>(c) * plane + i] = static_cast<float>(img.pixels[i * img.channels + c]) / 255.0f;
  return Tensor<float>::adopt({1, img.channels, img.height, img.width}, std::move(data));
}

/// Stacks pairs into a batch. With augmentation each pair is spatially
/// transformed and colour-jittered using draws from `rng` in list order;
/// without, all pairs must share a size divisible by 32.
inline Batch make_batch(const std::vector<SamplePair>& pairs, const AugmentConfig* augment = nullptr,
                        Rng* rng = nullptr) {
  if (pairs.empty()) throw BatchingError("make_batch: empty pair list");
  if (augment && !rng) throw ContractError("make_batch: augmentation requested without an rng");
  std::vector<std::pair<Image, Mask>> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (augment) {
      const auto params = sample_params(*rng, *augment, p.image.height, p.image.width);
      auto [img, mask] = apply_paired(p.image, p.mask, params);
      items.emplace_back(color_jitter(img, params), std::move(mask));
    } else {
      items.emplace_back(p.image, p.mask);
    }
  }
  const int h = items[0].first.height, w = items[0].first.width;
  for (const auto& [img, mask] : items) {
    if (img.height != h || img.width != w || mask.height != h || mask.width != w)
      throw BatchingError("make_batch: pairs have different sizes (" + std::to_string(h) + "x" + std::to_string(w) +
                          " vs " + std::to_string(img.height) + "x" + std::to_string(img.width) + ")");
    if (img.channels != 3) throw BatchingError("make_batch: images must be RGB");
  }
  if (!augment && (h % kSideMultiple != 0 || w % kSideMultiple != 0))
    throw BatchingError("make_batch: unaugmented size " + std::to_string(h) + "x" + std::to_string(w) +
                        " is not divisible by 32");
  const auto n = static_cast<std::int64_t>(items.size());
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Buffer<float> images(static_cast<std::size_t>(n) * 3 * plane), masks(static_cast<std::size_t>(n) * plane);
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto& [img, mask] = items[k];
    for (std::size_t i = 0; i < plane; ++i) {
      for (std::size_t c = 0; c < 3; ++c)
        images[(k * 3 + c) * plane + i] = static_cast<float>(img.pixels[i * 3 + c]) / 255.0f;
      masks[k * plane + i] = mask.data[i] ? 1.0f : 0.0f;
    }
  }
  return {Tensor<float>::adopt({n, 3, h, w}, std::move(images)),
          Tensor<float>::adopt({n, 1, h, w}, std::move(masks))};
}

/// Probability map (row-major H x W).
struct ProbMap {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  float at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const ProbMap&) const = default;
};

/// 8-bit mask file: 255 where prob >= threshold, else 0.
inline void write_mask(const ProbMap& prob, double threshold, const std::filesystem::path& path) {
  Image img(prob.height, prob.width, 1);
  for (std::size_t i = 0; i < prob.data.size(); ++i) img.pixels[i] = prob.data[i] >= threshold ? 255 : 0;
  write_image(path, img);
}

inline void write_mask(const Mask& mask, const std::filesystem::path& path) {
  Image img(mask.height, mask.width, 1);
  for (std::size_t i = 0; i < mask.data.size(); ++i) img.pixels[i] = mask.data[i] ? 255 : 0;
  write_image(path, img);
}

/// Road pixels blended halfway towards pure green, rounding half up.
inline Image overlay(const Image& image, const Mask& mask) {
  if (image.height != mask.height || image.width != mask.width)
    throw DimensionError("overlay: image and mask sizes differ");
  Image out = to_rgb(image);
  constexpr std::array<int, 3> green{0, 255, 0};
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (!mask.data[i]) continue;
    for (std::size_t c = 0; c < 3; ++c) {
      auto& px = out.pixels[i * 3 + c];
      px = static_cast<std::uint8_t>((px + green[c] + 1) / 2);
    }
  }
  return out;
}

inline void write_overlay(const Image& image, const Mask& mask, const std::filesystem::path& path) {
  write_image(path, overlay(image, mask));
}

struct DatasetEntry {
  std::string id;
  std::filesystem::path image_path;
  std::filesystem::path mask_path;
};

/// Pairs `<id><image_suffix>.<ext>` with `<id><mask_suffix>.<ext>` in a flat
/// directory. Entries are sorted by id.
inline std::vector<DatasetEntry> scan_dataset(const std::filesystem::path& dir, const std::string& image_suffix = "_sat",
                                              const std::string& mask_suffix = "_mask") {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  std::map<std::string, fs::path> images, masks;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_supported_image(e.path())) continue;
    const auto stem = e.path().stem().string();
    auto ends_with = [&](const std::string& suf) {
      return stem.size() > suf.size() && stem.compare(stem.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends_with(image_suffix))
      images[stem.substr(0, stem.size() - image_suffix.size())] = e.path();
    else if (ends_with(mask_suffix))
      masks[stem.substr(0, stem.size() - mask_suffix.size())] = e.path();
  }
  std::vector<DatasetEntry> out;
  for (const auto& [id, img] : images) {
    auto it = masks.find(id);
    if (it == masks.end()) throw PairingError("no mask found for image " + img.string());
    out.push_back({id, img, it->second});
  }
  return out;
}

/// Id-addressable sample source, either in memory or decoded on demand.
class Dataset {
public:
  static Dataset in_memory(std::vector<SamplePair> pairs) {
    Dataset d;
    for (const auto& p : pairs) d.ids_.push_back(p.id);
    d.check_unique();
    d.source_ = std::move(pairs);
    return d;
  }

  static Dataset from_entries(std::vector<DatasetEntry> entries, std::uint8_t mask_threshold = 128) {
    Dataset d;
    for (const auto& e : entries) d.ids_.push_back(e.id);
    d.check_unique();
    d.source_ = std::move(entries);
    d.mask_threshold_ = mask_threshold;
    return d;
  }

  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }

  /// Loads by id. Safe to call concurrently.
  SamplePair load(const std::string& id) const {
    const auto idx = index_of(id);
    if (const auto* mem = std::get_if<std::vector<SamplePair>>(&source_)) return (*mem)[idx];
    const auto& e = std::get<std::vector<DatasetEntry>>(source_)[idx];
    auto pair = load_pair(e.image_path, e.mask_path, mask_threshold_);
    pair.id = e.id;
    return pair;
  }

private:
  void check_unique() const {
    std::unordered_set<std::string> seen;
    for (const auto& id : ids_)
      if (!seen.insert(id).second) throw ConfigError("duplicate sample id '" + id + "'");
  }
  std::size_t index_of(const std::string& id) const {
    auto it = std::find(ids_.begin(), ids_.end(), id);
    if (it == ids_.end()) throw ContractError("dataset has no sample '" + id + "'");
    return static_cast<std::size_t>(it - ids_.begin());
  }

  std::vector<std::string> ids_;
  std::variant<std::vector<SamplePair>, std::vector<DatasetEntry>> source_;
  std::uint8_t mask_threshold_ = 128;
};

/// Produces items 0..count-1 on worker threads, at most `capacity` ahead of
/// the consumer, and hands them out strictly in index order. With zero
/// workers items are produced inline by next().
template <class Item>
class OrderedPrefetcher {
public:
  OrderedPrefetcher(std::function<Item(std::int64_t)> produce, std::int64_t count, int workers, int capacity = 2)
      : produce_(std::move(produce)), count_(count), capacity_(std::max(1, capacity)) {
    for (int i = 0; i < workers; ++i) threads_.emplace_back([this] { work(); });
  }

  ~OrderedPrefetcher() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  OrderedPrefetcher(const OrderedPrefetcher&) = delete;
  OrderedPrefetcher& operator=(const OrderedPrefetcher&) = delete;

  Item next() {
    if (consumed_ >= count_) throw ContractError("prefetcher exhausted");
    if (threads_.empty()) return produce_(consumed_++);
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return ready_.count(consumed_) > 0; });
    auto slot = std::move(ready_.at(consumed_));
    ready_.erase(consumed_);
    ++consumed_;
    lock.unlock();
    cv_.notify_all();
    if (slot.error) std::rethrow_exception(slot.error);
    return std::move(*slot.item);
  }

private:
  struct Slot {
    std::optional<Item> item;
    std::exception_ptr error;
  };

  void work() {
    for (;;) {
      std::int64_t idx;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stop_ || (next_ < count_ && next_ < consumed_ + capacity_); });
        if (stop_) return;
        idx = next_++;
      }
      Slot slot;
      try {
        slot.item.emplace(produce_(idx));
      } catch (...) {
        slot.error = std::current_exception();
      }
      {
        std::lock_guard lock(mu_);
        ready_.emplace(idx, std::move(slot));
      }
      cv_.notify_all();
    }
  }

  std::function<Item(std::int64_t)> produce_;
  std::int64_t count_;
  std::int64_t capacity_;
  std::int64_t next_ = 0;
  std::int64_t consumed_ = 0;
  bool stop_ = false;
  std::map<std::int64_t, Slot> ready_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::thread> threads_;
};

} // namespace roadseg
