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

#include <stdexcept>
#include <string>

namespace scaforge {

/// Base class of every error raised by the library. The CLI maps these to
/// exit codes; callers that care about the cause catch the derived types.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define SCAFORGE_DEFINE_ERROR(Name, Base)   \
    class Name : public Base {              \
    public:                                 \
        using Base::Base;                   \
    };

// I/O and file format
SCAFORGE_DEFINE_ERROR(IoError, Error)
SCAFORGE_DEFINE_ERROR(FormatError, Error)
SCAFORGE_DEFINE_ERROR(BadMagic, FormatError)
SCAFORGE_DEFINE_ERROR(UnsupportedVersion, FormatError)
SCAFORGE_DEFINE_ERROR(TruncatedFile, FormatError)
SCAFORGE_DEFINE_ERROR(UnsupportedDtype, FormatError)

// Trace handling
SCAFORGE_DEFINE_ERROR(MissingMetadata, Error)
SCAFORGE_DEFINE_ERROR(EmptyTraceSet, Error)
SCAFORGE_DEFINE_ERROR(ShiftTooLarge, Error)
SCAFORGE_DEFINE_ERROR(OutOfBounds, Error)
SCAFORGE_DEFINE_ERROR(InvalidConfig, Error)

// Analysis
SCAFORGE_DEFINE_ERROR(InsufficientClasses, Error)

// Networks and training
SCAFORGE_DEFINE_ERROR(ShapeMismatch, Error)
SCAFORGE_DEFINE_ERROR(OutOfRange, Error)
SCAFORGE_DEFINE_ERROR(NonFiniteGradient, Error)
SCAFORGE_DEFINE_ERROR(DivergedImmediately, Error)
SCAFORGE_DEFINE_ERROR(ManifestMismatch, Error)

// Attack
SCAFORGE_DEFINE_ERROR(MixedKeys, Error)

// Command line
SCAFORGE_DEFINE_ERROR(UsageError, Error)

#undef SCAFORGE_DEFINE_ERROR

}  // namespace scaforge
