#pragma once

// Reproducibility records: config snapshot, seed, argv, and git blob hashes
// of every input and output file.

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "connex/io.hpp"

namespace connex::tools {

inline constexpr int kRecordVersion = 1;

/// Same digest as `git hash-object`: sha1("blob <size>\0" + content).
inline std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha1 failed");
  }
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

inline nlohmann::json file_entry(const std::filesystem::path& p) {
  return {{"path", p.generic_string()}, {"git_sha1", git_blob_sha1(detail::read_text(p))}};
}

struct Record {
  std::string command;
  std::vector<std::string> argv;  // rewritten so that `--config <record>` reproduces the run
  nlohmann::json config;
  std::vector<std::filesystem::path> inputs, outputs;

  nlohmann::json to_json() const {
    nlohmann::json in = nlohmann::json::array(), out = nlohmann::json::array();
    for (const auto& p : inputs) in.push_back(file_entry(p));
    for (const auto& p : outputs) out.push_back(file_entry(p));
    return {{"record_version", kRecordVersion}, {"command", command}, {"argv", argv},
            {"seed", config.at("seed")},         {"config", config},   {"inputs", in},
            {"outputs", out}};
  }
};

/// Drops --config/--set (their effect lives in the snapshot) and points
/// --config at the record itself.
inline std::vector<std::string> rerun_argv(const std::vector<std::string>& args, const std::filesystem::path& record) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config" || a == "--set") {
      ++i;
      continue;
    }
    if (a.rfind("--config=", 0) == 0 || a.rfind("--set=", 0) == 0) continue;
    out.push_back(a);
  }
  out.push_back("--config");
  out.push_back(record.generic_string());
  return out;
}

}  // namespace connex::tools
