// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace minicache {

enum class ErrorCode {
    ShapeMismatch,
    NonFiniteValue,
    LayerCountMismatch,
    ZeroVector,
    DegenerateAntipodal,
    EmptyInput,
    IndexOutOfRange,
    EmptySlot,
    MissingPending,
    PendingConflict,
    DimsMismatch,
    BadMagic,
    TruncatedPayload,
    UnsupportedVersion,
    InvalidConfig,
    IoError,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::LayerCountMismatch: return "LayerCountMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DegenerateAntipodal: return "DegenerateAntipodal";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::EmptySlot: return "EmptySlot";
    case ErrorCode::MissingPending: return "MissingPending";
    case ErrorCode::PendingConflict: return "PendingConflict";
    case ErrorCode::DimsMismatch: return "DimsMismatch";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

/// Exception carrying a machine-readable code and, where relevant, the layer
/// and row the failure was detected at.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message,
          std::optional<std::size_t> layer = std::nullopt,
          std::optional<std::size_t> row = std::nullopt)
        : std::runtime_error(format(code, message, layer, row)),
          m_code(code), m_layer(layer), m_row(row) {}

    ErrorCode code() const noexcept { return m_code; }
    std::optional<std::size_t> layer() const noexcept { return m_layer; }
    std::optional<std::size_t> row() const noexcept { return m_row; }

private:
    static std::string format(ErrorCode code, const std::string& message,
                              std::optional<std::size_t> layer,
                              std::optional<std::size_t> row) {
        std::string out(to_string(code));
        if (layer || row) {
            out += "(";
            if (layer) out += "layer=" + std::to_string(*layer);
            if (layer && row) out += ",";
            if (row) out += "row=" + std::to_string(*row);
            out += ")";
        }
        if (!message.empty()) out += ": " + message;
        return out;
    }

    ErrorCode m_code;
    std::optional<std::size_t> m_layer;
    std::optional<std::size_t> m_row;
};

// CLI exit codes: 0 ok, 2 validation error, 3 numeric failure.
inline int exit_code_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::ZeroVector:
    case ErrorCode::DegenerateAntipodal:
        return 3;
    default:
        return 2;
    }
}

} // namespace minicache
