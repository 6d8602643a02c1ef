#include "p3d/blob.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace p3d {

void write_tensor_blob(const std::string& path, const std::string& name, const Tensor& t) {
    nlohmann::json header;
    header["name"] = name;
    header["dtype"] = dtype_name(t.dtype());
    header["shape"] = t.shape();
    const std::string hs = header.dump();
    const uint32_t hlen = static_cast<uint32_t>(hs.size());

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(hs.data(), hs.size());
    if (t.dtype() == DType::F32)
        f.write(reinterpret_cast<const char*>(t.data<float>()), t.numel() * sizeof(float));
    else
        f.write(reinterpret_cast<const char*>(t.data<double>()), t.numel() * sizeof(double));
    if (!f) throw std::runtime_error("write failed: " + path);
}

NamedTensor read_tensor_blob(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    uint32_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 4);
    if (!f || hlen == 0 || hlen > (1u << 20)) throw std::runtime_error("corrupt blob header: " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), hlen);
    if (!f) throw std::runtime_error("truncated blob header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
        throw std::runtime_error("invalid blob header JSON in " + path + ": " + e.what());
    }
    NamedTensor out;
    out.name = header.at("name").get<std::string>();
    const DType dtype = dtype_from_name(header.at("dtype").get<std::string>());
    Shape shape = header.at("shape").get<Shape>();
    out.tensor = Tensor(shape, dtype);

    const size_t elem = dtype == DType::F32 ? sizeof(float) : sizeof(double);
    const std::streamsize bytes = static_cast<std::streamsize>(out.tensor.numel() * elem);
    if (dtype == DType::F32)
        f.read(reinterpret_cast<char*>(out.tensor.data<float>()), bytes);
    else
        f.read(reinterpret_cast<char*>(out.tensor.data<double>()), bytes);
    if (f.gcount() != bytes)
        throw std::runtime_error("truncated blob data in " + path + ": expected " +
                                 std::to_string(bytes) + " bytes, got " + std::to_string(f.gcount()));
    return out;
}

}  // namespace p3d
