#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "fdiag/signal_synth.hpp"

namespace fdiag {

// Mixed-radix joint class index: ((irf*2 + orf)*3 + mis)*3 + unb.
inline int joint_from_levels(const FaultCondition& cond) {
    if (!cond.valid()) throw std::invalid_argument("joint_from_levels: level out of range");
    return ((cond.irf * kLevelCounts[1] + cond.orf) * kLevelCounts[2] + cond.mis) * kLevelCounts[3] +
           cond.unb;
}

inline FaultCondition levels_from_joint(int joint) {
    if (joint < 0 || joint >= static_cast<int>(kNumJointClasses))
        throw std::invalid_argument("levels_from_joint: index out of range");
    FaultCondition cond;
    cond.unb = joint % kLevelCounts[3];
    joint /= kLevelCounts[3];
    cond.mis = joint % kLevelCounts[2];
    joint /= kLevelCounts[2];
    cond.orf = joint % kLevelCounts[1];
    cond.irf = joint / kLevelCounts[1];
    return cond;
}

// All 36 conditions in joint-index order; index 0 is the healthy machine.
inline std::vector<FaultCondition> all_conditions() {
    std::vector<FaultCondition> out;
    out.reserve(kNumJointClasses);
    for (int j = 0; j < static_cast<int>(kNumJointClasses); ++j) out.push_back(levels_from_joint(j));
    return out;
}

}  // namespace fdiag
