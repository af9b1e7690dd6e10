#include "sparseformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

namespace sf {

namespace {

using Kind = CheckpointError::Kind;

constexpr char kMagic[8] = {'S', 'F', 'A', 'R', 'C', 'H', 'V', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
    if (dst.shape() != src.shape()) {
        throw CheckpointError(Kind::shape_mismatch, "checkpoint tensor " + name + " has shape " +
                                                        shape_str(src.shape()) + ", expected " +
                                                        shape_str(dst.shape()));
    }
    dst.copy_from(src);
}

}  // namespace

const ArchiveEntry* CheckpointArchive::find(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) {
            return &e;
        }
    }
    return nullptr;
}

const Tensor& CheckpointArchive::get(const std::string& name) const {
    const ArchiveEntry* e = find(name);
    if (!e) {
        throw CheckpointError(Kind::missing_tensor, "checkpoint has no tensor named " + name);
    }
    return e->tensor;
}

void save_checkpoint(const std::string& path, const CheckpointArchive& archive) {
    nlohmann::json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["metadata"] = archive.metadata;
    manifest["tensors"] = nlohmann::json::array();
    std::unordered_set<std::string> names;
    std::uint64_t offset = 0;
    for (const auto& e : archive.entries) {
        if (!names.insert(e.name).second) {
            throw CheckpointError(Kind::duplicate_name, "duplicate tensor name " + e.name);
        }
        const std::uint64_t nbytes = static_cast<std::uint64_t>(e.tensor.numel()) * 4;
        manifest["tensors"].push_back({{"name", e.name},
                                       {"shape", e.tensor.shape()},
                                       {"dtype", "f32"},
                                       {"role", e.role},
                                       {"offset", offset},
                                       {"nbytes", nbytes}});
        offset += nbytes;
    }
    const std::string text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw CheckpointError(Kind::io, "cannot open " + path + " for writing");
    }
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : archive.entries) {
        const Tensor f = e.tensor.dtype() == DType::f32 ? e.tensor : e.tensor.to(DType::f32);
        out.write(reinterpret_cast<const char*>(f.data<float>()), static_cast<std::streamsize>(f.numel() * 4));
    }
    if (!out) {
        throw CheckpointError(Kind::io, "write failed for " + path);
    }
}

CheckpointArchive load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError(Kind::io, "cannot open checkpoint " + path);
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw CheckpointError(Kind::bad_magic, path + " is not a checkpoint archive");
    }
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + sizeof kMagic, sizeof len);
    const std::size_t header = sizeof kMagic + sizeof len;
    if (len > bytes.size() - header) {
        throw CheckpointError(Kind::corrupt_manifest, path + ": manifest length exceeds file size");
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(header, len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::corrupt_manifest, path + ": manifest is not valid JSON (" + e.what() + ")");
    }
    CheckpointArchive archive;
    std::uint64_t expected = 0;
    try {
        const int version = manifest.at("format_version").get<int>();
        if (version != kCheckpointVersion) {
            throw CheckpointError(Kind::version_mismatch, path + ": format version " + std::to_string(version) +
                                                              ", this build reads " +
                                                              std::to_string(kCheckpointVersion));
        }
        archive.metadata = manifest.value("metadata", nlohmann::json::object());
        const std::string_view payload(bytes.data() + header + len, bytes.size() - header - len);
        std::unordered_set<std::string> names;
        for (const auto& t : manifest.at("tensors")) {
            ArchiveEntry e;
            e.name = t.at("name").get<std::string>();
            e.role = t.at("role").get<std::string>();
            if (!names.insert(e.name).second) {
                throw CheckpointError(Kind::duplicate_name, path + ": duplicate tensor name " + e.name);
            }
            if (t.at("dtype").get<std::string>() != "f32") {
                throw CheckpointError(Kind::corrupt_manifest, path + ": unsupported dtype for " + e.name);
            }
            const Shape shape = t.at("shape").get<Shape>();
            const auto offset = t.at("offset").get<std::uint64_t>();
            const auto nbytes = t.at("nbytes").get<std::uint64_t>();
            for (auto d : shape) {
                if (d < 0) {
                    throw CheckpointError(Kind::corrupt_manifest, path + ": negative dimension in " + e.name);
                }
            }
            if (nbytes != static_cast<std::uint64_t>(shape_numel(shape)) * 4 || offset != expected) {
                throw CheckpointError(Kind::corrupt_manifest, path + ": byte layout of " + e.name +
                                                                  " does not match its shape");
            }
            expected += nbytes;
            if (offset + nbytes > payload.size()) {
                throw CheckpointError(Kind::truncated_payload, path + ": payload ends inside tensor " + e.name);
            }
            e.tensor = Tensor::zeros(shape, DType::f32);
            std::memcpy(e.tensor.data<float>(), payload.data() + offset, nbytes);
            archive.entries.push_back(std::move(e));
        }
        if (payload.size() != expected) {
            throw CheckpointError(payload.size() < expected ? Kind::truncated_payload : Kind::corrupt_manifest,
                                  path + ": payload holds " + std::to_string(payload.size()) + " bytes, manifest " +
                                      "describes " + std::to_string(expected));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::corrupt_manifest, path + ": malformed manifest (" + e.what() + ")");
    }
    return archive;
}

CheckpointArchive teacher_archive(const TeacherWeights& w) {
    CheckpointArchive a;
    a.metadata["kind"] = "teacher";
    a.metadata["teacher_spec"] = w.spec;
    for (const auto& [name, t] : w.named()) {
        a.entries.push_back({name, t, "teacher"});
    }
    return a;
}

TeacherWeights teacher_from_archive(const CheckpointArchive& a) {
    if (a.metadata.value("kind", "") != "teacher") {
        throw CheckpointError(Kind::corrupt_manifest, "checkpoint does not hold a teacher");
    }
    std::mt19937_64 rng(0);
    TeacherWeights w = init_teacher(a.metadata.at("teacher_spec").get<TeacherSpec>(), rng);
    for (auto [name, t] : w.named()) {
        copy_into(t, a.get(name), name);
    }
    return w;
}

CheckpointArchive model_archive(const SparseFormer& m) {
    CheckpointArchive a;
    a.metadata["kind"] = "sparseformer";
    a.metadata["spec"] = m.spec;
    for (const auto& rt : m.tensors()) {
        a.entries.push_back({rt.name, rt.tensor, role_name(rt.role)});
    }
    return a;
}

SparseFormer model_from_archive(const CheckpointArchive& a) {
    if (a.metadata.value("kind", "") != "sparseformer") {
        throw CheckpointError(Kind::corrupt_manifest, "checkpoint does not hold a SparseFormer model");
    }
    std::mt19937_64 rng(0);
    SparseFormer m = init_sparseformer(a.metadata.at("spec").get<SparseFormerSpec>(), rng);
    for (auto& rt : m.tensors()) {
        const ArchiveEntry* e = a.find(rt.name);
        if (!e) {
            throw CheckpointError(Kind::missing_tensor, "checkpoint has no tensor named " + rt.name);
        }
        if (e->role != role_name(rt.role)) {
            throw CheckpointError(Kind::corrupt_manifest, "tensor " + rt.name + " stored with role " + e->role +
                                                              ", expected " + role_name(rt.role));
        }
        copy_into(rt.tensor, e->tensor, rt.name);
    }
    return m;
}

}  // namespace sf
