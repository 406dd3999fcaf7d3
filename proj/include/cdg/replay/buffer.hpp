#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include "cdg/data/datasets.hpp"
#include "cdg/rng.hpp"
#include "json.hpp"

namespace cdg::replay {

struct Entry {
  std::vector<double> x;
  int label = 0;
  int task = 0;
};

// Fixed-budget, class-balanced store of real samples from completed tasks.
//
// After each update the budget C is split over all classes seen so far by
// water-filling: a class with fewer stored (or available) samples than its
// share keeps all of them and the slack is shared by the rest. Classes that are
// not supply-limited end up within one sample of each other; the +1 remainders
// go to classes in a seeded order. Within a class, survivors are a uniform
// reservoir sample.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::uint64_t seed);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::map<int, std::size_t> class_counts() const;

  void update_after_task(const data::LabeledData& task_data, int task_id);

  // Uniform draw with replacement of n stored entries.
  data::LabeledData sample(std::size_t n, Rng& rng) const;

  // Called after every individual insertion or eviction batch during an update.
  void set_observer(std::function<void(const ReplayBuffer&)> observer) { observer_ = std::move(observer); }

  nlohmann::json to_json() const;
  void dump(const std::filesystem::path& path) const;

 private:
  void notify() const;

  std::size_t capacity_;
  Rng rng_;
  std::vector<Entry> entries_;
  std::function<void(const ReplayBuffer&)> observer_;
};

// Max-min fair split of `budget` over classes with the given supplies. Classes
// whose supply is below the fair level get their supply; the others get the
// level or level + 1, with +1 going to classes earlier in `order`.
std::map<int, std::size_t> balanced_quota(const std::map<int, std::size_t>& supply, std::size_t budget,
                                          const std::vector<int>& order);

std::string buffer_dump_name(int task);

}  // namespace cdg::replay
