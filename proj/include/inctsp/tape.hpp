#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "inctsp/rng.hpp"
#include "inctsp/tensor.hpp"

namespace inctsp {

enum class Padding { same, valid };

// Parameter name -> gradient tensor (same shape as the parameter).
using GradientMap = std::map<std::string, Tensor>;

struct BackwardResult {
    GradientMap params;
    std::optional<Tensor> input_grad;
};

// Reverse-mode tape. Operations are recorded in execution order, which is a
// valid topological order by construction; backward() walks it in reverse and
// consumes the tape (a second backward throws).
class Tape {
public:
    using NodeId = int32_t;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves. `input` is the designated differentiation input (at most one);
    // `param` is a named trainable leaf; `constant` never receives gradient.
    NodeId input(const Tensor& x, bool track);
    NodeId param(std::string name, const Tensor& value);
    NodeId constant(const Tensor& value);

    // Operations (forward executes immediately).
    NodeId conv2d(NodeId in, NodeId weight, NodeId bias, Padding pad, int stride_h, int stride_w);
    NodeId maxpool2d(NodeId in, int kh, int kw, int stride_h, int stride_w, Padding pad);
    NodeId relu(NodeId in);
    // mode==train normalizes with batch statistics (biased variance) and, when
    // update_running is set, folds them into running_mean/var in place;
    // mode==eval normalizes with the running statistics.
    NodeId batchnorm2d(NodeId in, NodeId scale, NodeId shift, Tensor& running_mean, Tensor& running_var,
                       bool train, double eps, double momentum, bool update_running);
    NodeId dropout(NodeId in, double rate, bool active, Rng* rng);
    NodeId dense(NodeId in, NodeId weight, NodeId bias);
    NodeId concat_channels(const std::vector<NodeId>& parts);
    NodeId reshape(NodeId in, Shape new_shape);
    NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels);
    NodeId sum(NodeId in);

    const Tensor& value(NodeId id) const;
    size_t num_nodes() const { return nodes_.size(); }

    BackwardResult backward(NodeId loss, bool wrt_input = false);

private:
    enum class Op { leaf, conv2d, maxpool2d, relu, batchnorm2d, dropout, dense, concat, reshape, softmax_ce, sum };
    enum class LeafRole { none, input, param, constant };

    struct ConvState {
        int64_t sh, sw, pt, pl;
    };
    struct PoolState {
        int64_t kh, kw, sh, sw, pt, pl;
        std::vector<int64_t> argmax;  // flat input index per output element
    };
    struct BnState {
        bool train;
        double eps;
        std::vector<double> mean, invstd;  // per channel
    };
    struct DropState {
        double keep_inv;
        std::vector<uint8_t> mask;  // empty when inactive (identity)
    };
    struct CeState {
        std::vector<int> labels;
        std::vector<double> probs;  // B*K softmax
    };
    struct NoState {};
    using State = std::variant<NoState, ConvState, PoolState, BnState, DropState, CeState>;

    struct Node {
        Op op = Op::leaf;
        LeafRole role = LeafRole::none;
        std::string name;
        std::vector<NodeId> inputs;
        Tensor value;
        bool requires_grad = false;
        State state;
    };

    NodeId push(Node&& n);
    Node& node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    bool any_requires(const std::vector<NodeId>& ids) const;

    void backward_dispatch(NodeId id);

    std::vector<Node> nodes_;
    NodeId input_id_ = -1;
    bool consumed_ = false;
};

// Central finite differences, (fn(x+h e_i) - fn(x-h e_i)) / 2h per element.
// The independent oracle for every analytic gradient in the project.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn, const Tensor& at, double h);

}  // namespace inctsp
