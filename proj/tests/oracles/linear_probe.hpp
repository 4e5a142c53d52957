/*
 * Copyright 2026 The SpikeMoE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Depth-0 linear probe: one-vs-rest ridge regression on raw pixels, solved
// in closed form through the n x n kernel system.

#pragma once

#include <Eigen/Dense>

#include "spikemoe/data.hpp"

namespace oracle {

inline Eigen::MatrixXd pixel_matrix(const spikemoe::Dataset& d) {
  Eigen::MatrixXd x(d.size(), d.sample_numel() + 1);
  for (spikemoe::Index i = 0; i < d.size(); ++i) {
    auto s = d.sample(i);
    for (spikemoe::Index j = 0; j < d.sample_numel(); ++j) x(i, j) = s[static_cast<std::size_t>(j)];
    x(i, d.sample_numel()) = 1.0;
  }
  return x;
}

/// Test accuracy of a ridge probe fitted on `train`.
inline double linear_probe_accuracy(const spikemoe::Dataset& train, const spikemoe::Dataset& test, double ridge = 1.0) {
  const Eigen::MatrixXd x = pixel_matrix(train);
  Eigen::MatrixXd y = Eigen::MatrixXd::Constant(train.size(), train.num_classes, -1.0);
  for (spikemoe::Index i = 0; i < train.size(); ++i) y(i, train.labels[static_cast<std::size_t>(i)]) = 1.0;
  Eigen::MatrixXd gram = x * x.transpose();
  gram.diagonal().array() += ridge;
  const Eigen::MatrixXd w = x.transpose() * gram.ldlt().solve(y);
  const Eigen::MatrixXd scores = pixel_matrix(test) * w;
  spikemoe::Index correct = 0;
  for (spikemoe::Index i = 0; i < test.size(); ++i) {
    Eigen::Index best = 0;
    scores.row(i).maxCoeff(&best);
    correct += best == test.labels[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace oracle
