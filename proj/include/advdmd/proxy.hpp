// Fixed toy reward models for the reward-hacking study: smooth scores in
// (0, 1] that a policy can inflate without matching the data distribution.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/mat.hpp"
#include "advdmd/reward.hpp"
#include "advdmd/sde.hpp"

namespace advdmd {

struct ProxyReward {
    enum class Kind { mode_pull, norm_penalty };

    Kind kind = Kind::mode_pull;
    Vec mu_star;       // mode_pull target
    double tau = 1.0;  // length scale

    static ProxyReward mode_pull(Vec target_mode, double tau = 1.0) {
        return {Kind::mode_pull, std::move(target_mode), tau};
    }
    static ProxyReward norm_penalty(double tau = 1.0) { return {Kind::norm_penalty, {}, tau}; }

    double value(std::span<const double> x) const {
        switch (kind) {
            case Kind::mode_pull: {
                if (x.size() != mu_star.size()) throw std::invalid_argument("ProxyReward: dimension mismatch");
                return std::exp(-squared_distance(x, mu_star) / tau);
            }
            case Kind::norm_penalty: return std::exp(-squared_norm(x) / tau);
        }
        return 0.0;
    }
};

// Same shape contract as the discriminator reward: one score per trajectory
// per schedule step, evaluated on the state entering the step.
inline RewardTable proxy_reward_table(const ProxyReward& proxy, const std::vector<Trajectory>& group) {
    if (group.empty()) throw std::invalid_argument("proxy_reward_table: empty group");
    const int G = static_cast<int>(group.size());
    const int T = static_cast<int>(group.front().steps.size());
    RewardTable table(G, T);
    for (int i = 0; i < G; ++i) {
        if (static_cast<int>(group[i].steps.size()) != T) {
            throw std::invalid_argument("proxy_reward_table: schedule mismatch");
        }
        for (int k = 0; k < T; ++k) table.at(i, k) = proxy.value(group[i].steps[k].x_from);
    }
    return table;
}

inline Vec proxy_terminal_rewards(const ProxyReward& proxy, const std::vector<Trajectory>& group) {
    if (group.empty()) throw std::invalid_argument("proxy_terminal_rewards: empty group");
    Vec out(group.size());
    for (size_t i = 0; i < group.size(); ++i) out[i] = proxy.value(group[i].steps.back().x_to);
    return out;
}

}  // namespace advdmd
