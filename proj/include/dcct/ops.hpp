#pragma once

#include <vector>

#include "dcct/autograd.hpp"

// Differentiable tensor operations. Matrices are [rows, cols]; a "grouped"
// matrix stacks `group` consecutive rows per sample, e.g. the H*W positions of
// one frame or the T frames of one clip.
namespace dcct::ops {

Var constant(Tensor value);
Var detach(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// 1 - x
Var one_minus(const Var& a);

// x[R,C] + bias[C] on every row.
Var add_row_vector(const Var& x, const Var& bias);
// x[N*T,C] + table[T,C] tiled over the N groups.
Var add_tiled(const Var& x, const Var& table);
// x[N,C] -> [N*times,C], each row repeated `times` consecutively.
Var repeat_rows(const Var& x, int times);

// a[m,k] * b[k,n]
Var matmul(const Var& a, const Var& b);
// x[R,in] * W[out,in]^T (+ b[out])
Var linear(const Var& x, const Var& weight, const Var* bias);

Var relu(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);

Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// x[N,C,H,W] normalized per (sample, channel group).
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
// x[N,Ci,H,W], w[Co,Ci,k,k] (square kernel), zero padding.
Var conv2d(const Var& x, const Var& weight, int stride, int pad);
// [N,C,H,W] -> [N*H*W, C], positions in row-major (h, w) order.
Var nchw_to_rows(const Var& x);

Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& x, int start, int width);

// [N*G, C] -> [N, C], mean over each group of G rows.
Var group_mean_rows(const Var& x, int group);
// out[n,p] = <keys[n*G+p,:], query[n,:]>, shapes keys[N*G,d], query[N,d] -> [N,G].
Var group_rowdot(const Var& keys, const Var& query, int group);
// out[n,:] = sum_p weights[n,p] * values[n*G+p,:], weights[N,G], values[N*G,C] -> [N,C].
Var group_weighted_sum(const Var& weights, const Var& values, int group);

// Scaled dot-product attention over groups of `tokens` rows, split into
// `heads` column blocks. q, k, v are [N*L, D]. When `probs_out` is non-null it
// receives the softmax rows laid out [N][heads][L][L].
Var multi_head_attention(const Var& q, const Var& k, const Var& v, int tokens, int heads, double scale,
                         std::vector<double>* probs_out = nullptr);

Var sum(const Var& x);
Var mean(const Var& x);
// sum_i w_i * x_i with constant weights.
Var weighted_sum(const Var& x, const Tensor& weights);

// Mean over rows of -log softmax(logits)[label], optionally label-smoothed.
Var cross_entropy(const Var& logits, const std::vector<int>& labels, double smoothing = 0.0);

enum class KlDirection { StudentTeacher, TeacherStudent };
// Sum over rows of KL between softmax(student_logits) and the constant
// distribution in `teacher_probs` (same shape).
Var kl_divergence(const Var& student_logits, const Tensor& teacher_probs, KlDirection direction);

// Batch-hard triplet loss over features[N,D] with Euclidean distances.
Var batch_hard_triplet(const Var& features, const std::vector<int>& labels, double margin);

}  // namespace dcct::ops
