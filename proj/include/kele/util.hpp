// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kele/tensor.hpp"

namespace kele {

inline constexpr std::string_view kToolVersion = "0.3.0";

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

/// Little-endian f64 payload, base64 encoded.
std::string encode_f64_base64(const Vector& v);
Vector decode_f64_base64(std::string_view text);

void append_f64_le(std::vector<std::uint8_t>& out, double value);
double read_f64_le(const std::uint8_t* p);

std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace kele
