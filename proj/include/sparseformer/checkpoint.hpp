#pragma once

#include "sparseformer/model.hpp"
#include "sparseformer/vit.hpp"

#include "json.hpp"

#include <string>
#include <vector>

namespace sf {

inline constexpr int kCheckpointVersion = 1;

/// Layout: 8-byte magic, u64 little-endian manifest length, JSON manifest, then
/// the little-endian f32 payload. The manifest lists name, shape, dtype, role,
/// byte offset and byte length of every tensor plus free-form metadata.
struct ArchiveEntry {
    std::string name;
    Tensor tensor;
    std::string role;
};

struct CheckpointArchive {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<ArchiveEntry> entries;

    const ArchiveEntry* find(const std::string& name) const;
    /// Throws CheckpointError(missing_tensor) when absent.
    const Tensor& get(const std::string& name) const;
};

class CheckpointError : public Error {
public:
    enum class Kind { io, bad_magic, corrupt_manifest, truncated_payload, duplicate_name, version_mismatch, missing_tensor, shape_mismatch };
    CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

void save_checkpoint(const std::string& path, const CheckpointArchive& archive);
CheckpointArchive load_checkpoint(const std::string& path);

CheckpointArchive teacher_archive(const TeacherWeights& w);
TeacherWeights teacher_from_archive(const CheckpointArchive& a);

/// Stores every model tensor with its role, the spec and the donor teacher spec.
CheckpointArchive model_archive(const SparseFormer& m);
SparseFormer model_from_archive(const CheckpointArchive& a);

}  // namespace sf
