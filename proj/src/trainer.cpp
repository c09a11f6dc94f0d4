#include "patchscope/trainer.hpp"

#include <cstdio>
#include <limits>

namespace patchscope {

void TrainConfig::validate() const {
  if (lr <= 0 || beta1 <= 0 || beta2 <= 0 || adam_eps <= 0 ||
      lr_drop_factor <= 0 || plateau_threshold <= 0) {
    throw ConfigError("train config values must be positive");
  }
  if (beta1 >= 1.0 || beta2 >= 1.0) {
    throw ConfigError("adam betas must be in (0,1)");
  }
  if (batch_size < 1 || micro_batch < 1 || max_epochs < 1) {
    throw ConfigError("batch_size, micro_batch and max_epochs must be >= 1");
  }
  if (plateau_patience < 1) throw ConfigError("plateau patience must be >= 1");
}

PlateauSchedule::PlateauSchedule(int patience, double threshold, double factor)
    : patience_(patience),
      threshold_(threshold),
      factor_(factor),
      best_(-std::numeric_limits<double>::infinity()) {}

bool PlateauSchedule::observe(double val_acc, double& lr) {
  // An epoch counts as improving only when it beats the reference by the
  // full threshold; the reference moves only on such epochs.
  if (val_acc >= best_ + threshold_) {
    best_ = val_acc;
    bad_epochs_ = 0;
    return false;
  }
  ++bad_epochs_;
  if (bad_epochs_ >= patience_) {
    lr /= factor_;
    bad_epochs_ = 0;
    return true;
  }
  return false;
}

std::string TrainLog::to_text() const {
  std::string out;
  char line[160];
  for (const auto& e : entries) {
    std::snprintf(line, sizeof(line),
                  "epoch=%d train_loss=%.12g val_acc=%.6f lr=%.6g\n", e.epoch,
                  e.train_loss, e.val_acc, e.lr);
    out += line;
  }
  return out;
}

}  // namespace patchscope
