#pragma once

#include <string>
#include <vector>

#include "filora/tensor.hpp"

namespace filora {

/// Learning-rate group a trainable tensor belongs to.
enum class ParamGroup { kAdapter, kEncoder };

struct NamedParam {
    std::string name;
    Tensor* tensor = nullptr;
    ParamGroup group = ParamGroup::kAdapter;
};

std::size_t total_param_count(const std::vector<NamedParam>& params);

}  // namespace filora
