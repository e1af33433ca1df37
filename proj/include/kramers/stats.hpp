#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "kramers/errors.hpp"

namespace kramers {

// Streaming mean, variance, min and max of named per-path observables.
class PathEnsembleStats {
 public:
  PathEnsembleStats() = default;
  explicit PathEnsembleStats(std::vector<std::string> names)
      : names_(std::move(names)),
        mean_(names_.size(), 0.0),
        m2_(names_.size(), 0.0),
        min_(names_.size(), std::numeric_limits<double>::infinity()),
        max_(names_.size(), -std::numeric_limits<double>::infinity()) {}

  void add(std::span<const double> values) {
    if (values.size() != names_.size()) throw InvalidInput("observation has the wrong number of entries");
    ++count_;
    const double c = static_cast<double>(count_);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double d = values[i] - mean_[i];
      mean_[i] += d / c;
      m2_[i] += d * (values[i] - mean_[i]);
      min_[i] = std::min(min_[i], values[i]);
      max_[i] = std::max(max_[i], values[i]);
    }
  }

  void merge(const PathEnsembleStats& o) {
    if (o.names_ != names_) throw InvalidInput("cannot merge statistics with different observables");
    if (o.count_ == 0) return;
    const double na = static_cast<double>(count_);
    const double nb = static_cast<double>(o.count_);
    const double nt = na + nb;
    for (std::size_t i = 0; i < mean_.size(); ++i) {
      const double d = o.mean_[i] - mean_[i];
      mean_[i] += d * nb / nt;
      m2_[i] += o.m2_[i] + d * d * na * nb / nt;
      min_[i] = std::min(min_[i], o.min_[i]);
      max_[i] = std::max(max_[i], o.max_[i]);
    }
    count_ += o.count_;
  }

  std::size_t index(const std::string& name) const {
    const auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw InvalidInput("unknown observable " + name);
    return static_cast<std::size_t>(it - names_.begin());
  }

  bool has(const std::string& name) const { return std::find(names_.begin(), names_.end(), name) != names_.end(); }

  long count() const { return count_; }
  const std::vector<std::string>& names() const { return names_; }
  double mean(const std::string& name) const { return mean_[index(name)]; }
  double variance(const std::string& name) const {
    return count_ > 1 ? m2_[index(name)] / static_cast<double>(count_ - 1) : 0.0;
  }
  double stderr_of(const std::string& name) const {
    return count_ > 1 ? std::sqrt(variance(name) / static_cast<double>(count_)) : 0.0;
  }
  double min(const std::string& name) const { return min_[index(name)]; }
  double max(const std::string& name) const { return max_[index(name)]; }

 private:
  std::vector<std::string> names_;
  long count_ = 0;
  std::vector<double> mean_, m2_, min_, max_;
};

}  // namespace kramers
