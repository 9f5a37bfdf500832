#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <thread>
#include <utility>
#include <vector>

namespace fc {

/// Paths per reduction block. Blocks are the unit of work and of reduction,
/// so results do not depend on the worker count.
inline constexpr std::size_t kPathBlock = 512;

inline int default_workers() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

/// Purpose tags keep streams of different experiments on the same seed apart.
enum class StreamTag : std::uint32_t {
  walk = 1,
  kernel = 2,
  theta = 3,
  control = 4,
  auxiliary = 5,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent engine for (master seed, path index, purpose).
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t path_index, StreamTag tag = StreamTag::walk) {
  const std::uint64_t key =
      splitmix64(splitmix64(splitmix64(seed) ^ path_index) ^ (static_cast<std::uint64_t>(tag) << 56));
  return std::mt19937_64(key);
}

/// Uniform integer in [0, n) by multiply-shift; same result on every platform.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
}

/// Runs fn(begin, end, partial) over fixed blocks of [0, n_paths) and folds
/// the per-block partials in block order with merge(into, from).
template <class Partial, class BlockFn, class Merge>
Partial reduce_blocks(std::size_t n_paths, int workers, const Partial& init, BlockFn&& fn, Merge&& merge) {
  const std::size_t n_blocks = (n_paths + kPathBlock - 1) / kPathBlock;
  std::vector<Partial> partials(n_blocks, init);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto work = [&] {
    for (;;) {
      const std::size_t b = next.fetch_add(1);
      if (b >= n_blocks) return;
      try {
        fn(b * kPathBlock, std::min(n_paths, (b + 1) * kPathBlock), partials[b]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(n_blocks);
        return;
      }
    }
  };

  const int n_workers = std::max(1, std::min<int>(workers <= 0 ? default_workers() : workers,
                                                  static_cast<int>(std::max<std::size_t>(n_blocks, 1))));
  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);

  Partial total = init;
  for (const auto& p : partials) merge(total, p);
  return total;
}

/// Per-path form of reduce_blocks: fn(path_index, partial).
template <class Partial, class Fn, class Merge>
Partial reduce_paths(std::size_t n_paths, int workers, const Partial& init, Fn&& fn, Merge&& merge) {
  return reduce_blocks(
      n_paths, workers, init,
      [&](std::size_t begin, std::size_t end, Partial& partial) {
        for (std::size_t i = begin; i < end; ++i) fn(i, partial);
      },
      std::forward<Merge>(merge));
}

}  // namespace fc
