/*
 * SPDX-FileCopyrightText: Copyright 2026 The scaforge Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "scaforge/errors.hpp"

namespace scaforge {

/// Dense row-major buffer with a shape. T is float for training and double
/// for verification runs.
template <class T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape_, T fill = T{0})
        : shape(std::move(shape_)), data(numel_of(shape), fill) {}
    Tensor(std::vector<std::size_t> shape_, std::vector<T> data_) : shape(std::move(shape_)), data(std::move(data_)) {
        if (data.size() != numel_of(shape)) throw ShapeMismatch("tensor buffer does not match its shape");
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t size() const { return data.size(); }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    bool operator==(const Tensor&) const = default;
};

/// Named tensors, iterated in lexicographic name order.
template <class T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <class T>
using Gradients = ParamMap<T>;

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out;
    out.shape = t.shape;
    out.data.assign(t.data.begin(), t.data.end());
    return out;
}

template <class To, class From>
ParamMap<To> params_cast(const ParamMap<From>& m) {
    ParamMap<To> out;
    for (const auto& [name, t] : m) out.emplace(name, tensor_cast<To>(t));
    return out;
}

}  // namespace scaforge
