// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "qadapt/kernels.hpp"
#include "qadapt/tape.hpp"

// Differentiable ops. Each computes its value eagerly and records a backward
// rule on the tape of its inputs. All inputs of one op must share a tape.
namespace qadapt::ad {

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// Multiplies every element of `a` by the single element of `s`.
Var scale_by(Var a, Var s);
/// Adds a length-n vector to every row of an m x n matrix.
Var add_rowvec(Var a, Var bias);
Var gelu(Var a);
Var sigmoid(Var a);
Var softmax_rows(Var x);
/// Row i of an m x n score matrix may attend to columns j <= i + (n - m).
Var causal_softmax_rows(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);
/// Rows [begin, end).
Var slice_rows(Var a, std::size_t begin, std::size_t end);
/// Columns [begin, end).
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Row lookup, e.g. token embeddings.
Var gather_rows(Var table, std::span<const int> ids);
/// Elementwise mean of same-shaped inputs.
Var mean(std::span<const Var> parts);
Var sum(Var a);
/// Sum over rows of -log softmax(logits_i)[target_i]; rows whose target equals
/// `ignore_id` contribute nothing.
Var cross_entropy(Var logits, std::span<const int> targets, int ignore_id);

/// x w + b.
inline Var linear(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

}  // namespace qadapt::ad
