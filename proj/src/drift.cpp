#include "ssip/drift.hpp"

namespace ssip {

using tape::Graph;
using tape::NodeId;
using tape::Tensor;

namespace {

Tensor single_input(std::span<const double> a, double t, std::span<const double> h) {
    Tensor x(1, a.size() + kTimeFeatures + h.size());
    auto v = x.values();
    std::copy(a.begin(), a.end(), v.begin());
    time_features(t, v.subspan(a.size(), kTimeFeatures));
    std::copy(h.begin(), h.end(), v.begin() + static_cast<std::ptrdiff_t>(a.size() + kTimeFeatures));
    return x;
}

}  // namespace

PolicyDrift::PolicyDrift(const PolicyNets& nets, const ScheduleSet& schedules)
    : nets_(nets), schedules_(schedules) {
    nets_.validate();
}

double PolicyDrift::score_coefficient(double t, DriftForm form) const {
    const double eps = form == DriftForm::sde ? schedules_.epsilon(t) : 0.0;
    return eps - schedules_.gamma_gamma_dot(t);
}

Vec PolicyDrift::drift(std::span<const double> a, double t, std::span<const double> h,
                       DriftForm form) const {
    const Tensor x = single_input(a, t, h);
    const Tensor v = tape::mlp_eval(nets_.v_net, x);
    const Tensor eta = tape::mlp_eval(nets_.eta_net, x);
    const Vec s = score_from_eta(eta.values(), t, schedules_);
    const double c = score_coefficient(t, form);
    Vec b(a.size());
    for (std::size_t j = 0; j < b.size(); ++j) b[j] = v[j] + c * s[j];
    return b;
}

NodeId PolicyDrift::drift_node(Graph& graph, NodeId a, double t, std::span<const double> h,
                               DriftForm form) const {
    const NodeId x = policy_input(graph, a, t, h);
    const NodeId v = tape::mlp_forward(graph, nets_.v_net, x).output;
    const NodeId eta = tape::mlp_forward(graph, nets_.eta_net, x).output;
    // c * s = c * (-eta / gamma_clamped)
    const double factor = -score_coefficient(t, form) / schedules_.gamma_clamped(t);
    return graph.add(v, graph.scale(eta, factor));
}

Vec LinearDrift::drift(std::span<const double> a, double, std::span<const double>, DriftForm) const {
    Vec b(a.size());
    for (std::size_t j = 0; j < b.size(); ++j) b[j] = -rate_ * a[j];
    return b;
}

NodeId LinearDrift::drift_node(Graph& graph, NodeId a, double, std::span<const double>, DriftForm) const {
    return graph.scale(a, -rate_);
}

Vec base_drift(std::span<const double> a, double t, std::span<const double> h, const PolicyNets& nets,
               const ScheduleSet& schedules) {
    return PolicyDrift(nets, schedules).drift(a, t, h, DriftForm::sde);
}

}  // namespace ssip
