#include "cdg/replay/buffer.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "cdg/error.hpp"

namespace cdg::replay {

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
  if (capacity == 0) throw DomainError("replay buffer: capacity must be >= 1");
}

std::map<int, std::size_t> ReplayBuffer::class_counts() const {
  std::map<int, std::size_t> counts;
  for (const auto& e : entries_) ++counts[e.label];
  return counts;
}

void ReplayBuffer::notify() const {
  if (entries_.size() > capacity_) {
    throw StateError("replay buffer: size " + std::to_string(entries_.size()) + " exceeds capacity " +
                     std::to_string(capacity_));
  }
  if (observer_) observer_(*this);
}

std::map<int, std::size_t> balanced_quota(const std::map<int, std::size_t>& supply, std::size_t budget,
                                          const std::vector<int>& order) {
  std::map<int, std::size_t> quota;
  std::set<int> open;
  for (const auto& [label, s] : supply) open.insert(label);
  std::size_t remaining = budget;
  // Repeatedly settle classes that cannot fill the current fair level.
  bool changed = true;
  while (changed && !open.empty()) {
    changed = false;
    const std::size_t level = remaining / open.size();
    for (auto it = open.begin(); it != open.end();) {
      const std::size_t s = supply.at(*it);
      if (s <= level) {
        quota[*it] = s;
        remaining -= s;
        it = open.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
  }
  if (open.empty()) return quota;
  const std::size_t level = remaining / open.size();
  std::size_t extra = remaining % open.size();
  for (int label : open) quota[label] = level;
  for (int label : order) {
    if (extra == 0) break;
    if (open.count(label) != 0) {
      ++quota[label];
      --extra;
    }
  }
  return quota;
}

void ReplayBuffer::update_after_task(const data::LabeledData& task_data, int task_id) {
  // Candidate pools per class: stored entries for old classes, task rows for new ones.
  std::map<int, std::vector<std::size_t>> stored;
  for (std::size_t i = 0; i < entries_.size(); ++i) stored[entries_[i].label].push_back(i);
  std::map<int, std::vector<std::size_t>> incoming;
  for (std::size_t i = 0; i < task_data.size(); ++i) {
    const int label = task_data.labels[i];
    if (stored.count(label) != 0) {
      throw StateError("replay buffer: class " + std::to_string(label) + " already stored from an earlier task");
    }
    incoming[label].push_back(i);
  }

  std::map<int, std::size_t> supply;
  for (const auto& [label, rows] : stored) supply[label] = rows.size();
  for (const auto& [label, rows] : incoming) supply[label] = rows.size();
  std::vector<int> order;
  for (const auto& [label, s] : supply) order.push_back(label);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_.uniform_int(i)]);
  const auto quota = balanced_quota(supply, capacity_, order);

  // Reservoir sample of q indices out of pool, kept in pool order.
  const auto reservoir = [this](const std::vector<std::size_t>& pool, std::size_t q) {
    std::vector<std::size_t> keep(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(q, pool.size())));
    for (std::size_t i = q; i < pool.size(); ++i) {
      const std::size_t j = rng_.uniform_int(i + 1);
      if (j < q) keep[j] = pool[i];
    }
    std::sort(keep.begin(), keep.end());
    return keep;
  };

  // Shrink old classes first so the buffer never grows past capacity.
  std::vector<bool> survive(entries_.size(), false);
  for (const auto& [label, rows] : stored) {
    for (std::size_t i : reservoir(rows, quota.at(label))) survive[i] = true;
  }
  std::vector<Entry> kept;
  kept.reserve(capacity_);
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (survive[i]) kept.push_back(std::move(entries_[i]));
  }
  entries_ = std::move(kept);
  notify();

  for (const auto& [label, rows] : incoming) {
    for (std::size_t i : reservoir(rows, quota.at(label))) {
      const auto x = task_data.x.row(i);
      entries_.push_back(Entry{std::vector<double>(x.begin(), x.end()), label, task_id});
      notify();
    }
  }
}

data::LabeledData ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  if (entries_.empty()) throw StateError("replay buffer: cannot sample from an empty buffer");
  const std::size_t d = entries_.front().x.size();
  data::LabeledData out;
  out.x = ad::Tensor(ad::Shape{n, d});
  out.labels.resize(n);
  out.tasks.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Entry& e = entries_[rng.uniform_int(entries_.size())];
    std::copy(e.x.begin(), e.x.end(), out.x.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    out.labels[i] = e.label;
    out.tasks[i] = e.task;
  }
  return out;
}

nlohmann::json ReplayBuffer::to_json() const {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [label, c] : class_counts()) counts[std::to_string(label)] = c;
  nlohmann::json items = nlohmann::json::array();
  for (const auto& e : entries_) items.push_back({{"x", e.x}, {"label", e.label}, {"task", e.task + 1}});
  return {{"capacity", capacity_}, {"size", entries_.size()}, {"class_counts", counts}, {"entries", items}};
}

void ReplayBuffer::dump(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << to_json().dump(1) << '\n';
}

std::string buffer_dump_name(int task) { return "buffer_task" + std::to_string(task) + ".json"; }

}  // namespace cdg::replay
