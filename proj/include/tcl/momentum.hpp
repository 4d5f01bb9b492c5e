#pragma once

// EMA shadow parameters and fixed-capacity negative queues.

#include <cstdint>
#include <string>

#include "tcl/encoders.hpp"
#include "tcl/matrix.hpp"

namespace tcl::momentum {

// Online parameters and their EMA shadow, matched by position.
struct MomentumPair {
  model::ParamSet online;
  model::ParamSet shadow;
  double m = 0.995;

  MomentumPair(model::ParamSet online_params, model::ParamSet shadow_params, double coefficient);
};

// shadow <- m * shadow + (1 - m) * online, for every tensor in the pair.
void ema_update(const MomentumPair& pair);

enum class QueueKind { text, image };

std::string to_string(QueueKind k);

class NegativeQueue {
 public:
  NegativeQueue(std::size_t capacity, std::size_t dim, QueueKind kind);

  // Fills the queue with seeded random unit vectors (filled == capacity).
  void warm_start(std::uint64_t seed);

  // Appends rows, evicting the oldest entries once full. Rows must be unit
  // norm within 1e-4 and the batch may not exceed the capacity.
  void enqueue(const Matrix& batch);

  // Current entries, oldest first.
  Matrix negatives() const;

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t filled() const { return filled_; }
  std::size_t head() const { return head_; }
  std::uint64_t pushed() const { return pushed_; }
  std::uint64_t evicted() const { return evicted_; }
  QueueKind kind() const { return kind_; }

  // Raw ring state, used by checkpointing.
  const Matrix& buffer() const { return buffer_; }
  void restore(Matrix buffer, std::size_t head, std::size_t filled, std::uint64_t pushed,
               std::uint64_t evicted);

 private:
  std::size_t capacity_;
  std::size_t dim_;
  QueueKind kind_;
  Matrix buffer_;
  std::size_t head_ = 0;  // next write slot
  std::size_t filled_ = 0;
  std::uint64_t pushed_ = 0;
  std::uint64_t evicted_ = 0;
};

}  // namespace tcl::momentum
