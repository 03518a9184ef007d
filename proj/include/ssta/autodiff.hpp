#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ssta/mat.hpp"

namespace ssta {

// Trainable parameter. Gradients accumulate across tapes until the optimizer
// consumes them; m/v are the optimizer's moment buffers.
struct Param {
    std::string name;
    Mat value;
    Mat grad;
    Mat m;
    Mat v;

    Param() = default;
    Param(std::string n, Mat val)
        : name(std::move(n)),
          value(std::move(val)),
          grad(value.rows(), value.cols()),
          m(value.rows(), value.cols()),
          v(value.rows(), value.cols()) {}
};

using Var = int;

struct ConvSpec {
    int in_channels;
    int height;
    int width;
    int out_channels;
    int kernel;
    int stride;
    int pad;
    int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
    int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

// Reverse-mode tape. Nodes are appended in evaluation order; backward walks
// the tape in reverse, so gradient accumulation order is fixed and runs are
// bitwise reproducible. Values live on the tape; Vars are indices into it.
class Tape {
  public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }
    void clear();

    const Mat& value(Var v) const { return nodes_[v].value; }
    Mat& grad(Var v);
    double scalar(Var v) const { return nodes_[v].value(0, 0); }

    Var constant(Mat value);
    Var scalar_constant(double value);
    Var param(Param& p);

    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var min2(Var a, Var b);
    Var max2(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var add_rowvec(Var m, Var row);   // row: 1 x C broadcast over rows
    Var add_colvec(Var m, Var col);   // col: R x 1 broadcast over columns

    Var relu(Var a);
    Var leaky_relu(Var a, double slope);
    Var sigmoid(Var a);
    Var log_(Var a);
    Var abs_(Var a);
    Var square(Var a);
    Var clamp(Var a, double lo, double hi);

    Var softmax_rows(Var a);
    Var log_softmax_rows(Var a);
    Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

    Var sum(Var a);                    // -> 1x1
    Var mean(Var a);                   // -> 1x1
    Var row_sums(Var a);               // N x M -> N x 1
    Var gather_rows(Var a, std::vector<int> idx);
    Var slice_cols(Var a, int c0, int c1);
    Var concat_cols(const std::vector<Var>& parts);

    // Identity forward; backward multiplies the incoming gradient by -scale.
    Var grl(Var a, double scale);

    // x: Cin x (H*W), w: Cout x (Cin*k*k), b: 1 x Cout -> Cout x (Ho*Wo)
    Var conv2d(Var x, Var w, Var b, const ConvSpec& spec);

    // Deformable sampling: values (Nk x d) interpreted as a (H x W) grid per
    // column, split column-wise into `heads` groups. locs (Nq x heads*points*2,
    // interleaved y,x in grid units), attn (Nq x heads*points, nonnegative).
    // Output row i, head h = sum_p attn * bilinear(values_h, loc), with
    // locations clamped to [0,H-1]x[0,W-1].
    Var deformable_attend(Var values, Var locs, Var attn, int grid_h, int grid_w, int heads);

    void backward(Var loss);

  private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        std::function<void()> backprop;  // pulls from this node's grad into inputs'
    };

    Var push(Mat value, bool requires_grad, std::function<void()> backprop = nullptr);

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

}  // namespace ssta
