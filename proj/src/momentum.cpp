#include "tcl/momentum.hpp"

#include <cmath>

#include "tcl/errors.hpp"
#include "tcl/rng.hpp"

namespace tcl::momentum {

MomentumPair::MomentumPair(model::ParamSet online_params, model::ParamSet shadow_params,
                           double coefficient)
    : online(std::move(online_params)), shadow(std::move(shadow_params)), m(coefficient) {
  require_config(m >= 0.0 && m <= 1.0,
                 "momentum coefficient must lie in [0,1] (got " + std::to_string(m) + ")");
  require(online.size() == shadow.size(), "MomentumPair: parameter count mismatch");
  for (std::size_t i = 0; i < online.size(); ++i)
    require(online[i].var->value.same_shape(shadow[i].var->value),
            "MomentumPair: shape mismatch at " + online[i].name);
}

void ema_update(const MomentumPair& pair) {
  require_config(pair.m >= 0.0 && pair.m <= 1.0, "momentum coefficient must lie in [0,1]");
  const double m = pair.m;
  for (std::size_t i = 0; i < pair.online.size(); ++i) {
    const Matrix& src = pair.online[i].var->value;
    Matrix& dst = pair.shadow[i].var->value;
    require(src.same_shape(dst), "ema_update: shape mismatch at " + pair.online[i].name);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = m * dst[k] + (1.0 - m) * src[k];
  }
}

std::string to_string(QueueKind k) { return k == QueueKind::text ? "text" : "image"; }

NegativeQueue::NegativeQueue(std::size_t capacity, std::size_t dim, QueueKind kind)
    : capacity_(capacity), dim_(dim), kind_(kind), buffer_(capacity, dim) {
  require_config(dim > 0, "queue dimension must be positive");
}

void NegativeQueue::warm_start(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t r = 0; r < capacity_; ++r)
    for (double& v : buffer_.row(r)) v = rng.normal();
  normalize_rows(buffer_, 0.0);
  head_ = 0;
  filled_ = capacity_;
}

void NegativeQueue::enqueue(const Matrix& batch) {
  require(batch.cols() == dim_, "enqueue: dimension mismatch");
  require(batch.rows() <= capacity_, "enqueue: batch larger than queue capacity");
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const double n = l2_norm(batch.row(r));
    require(std::abs(n - 1.0) <= 1e-4,
            "enqueue: row " + std::to_string(r) + " is not unit norm (" + std::to_string(n) + ")");
  }
  if (capacity_ == 0) return;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto src = batch.row(r);
    std::copy(src.begin(), src.end(), buffer_.row(head_).begin());
    head_ = (head_ + 1) % capacity_;
    ++pushed_;
    if (filled_ < capacity_) {
      ++filled_;
    } else {
      ++evicted_;
    }
  }
}

Matrix NegativeQueue::negatives() const {
  Matrix out(filled_, dim_);
  // Oldest entry sits at head_ once full, at 0 before that.
  const std::size_t start = filled_ == capacity_ ? head_ : 0;
  for (std::size_t i = 0; i < filled_; ++i) {
    auto src = buffer_.row((start + i) % capacity_);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void NegativeQueue::restore(Matrix buffer, std::size_t head, std::size_t filled,
                            std::uint64_t pushed, std::uint64_t evicted) {
  require(buffer.rows() == capacity_ && buffer.cols() == dim_, "restore: buffer shape mismatch");
  require(head < std::max<std::size_t>(capacity_, 1) && filled <= capacity_,
          "restore: ring indices out of range");
  buffer_ = std::move(buffer);
  head_ = head;
  filled_ = filled;
  pushed_ = pushed;
  evicted_ = evicted;
}

}  // namespace tcl::momentum
