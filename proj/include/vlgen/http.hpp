#pragma once

// Binds Service handlers to a cpp-httplib server.

#include <charconv>
#include <optional>
#include <string>

#include "vlgen/service.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro that
// breaks Eigen's product kernels.
#include <httplib.h>

namespace vlgen {

inline constexpr std::size_t kMaxRequestBytes = 8u << 20;

template <typename T>
void install_routes(httplib::Server& server, const Service<T>& service) {
  auto reply = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.set_payload_max_length(kMaxRequestBytes);
  server.Get("/health", [&service, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, service.health());
  });
  server.Get("/datasets", [&service, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, service.list_datasets());
  });
  server.Get("/datasets/random", [&service, reply](const httplib::Request& req, httplib::Response& res) {
    std::optional<std::uint64_t> seed;
    if (req.has_param("seed")) {
      const std::string s = req.get_param_value("seed");
      std::uint64_t v = 0;
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size())
        return reply(res, Service<T>::error(400, "seed must be a non-negative integer"));
      seed = v;
    }
    reply(res, service.random_dataset(seed));
  });
  server.Post("/generate", [&service, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.generate(req.body));
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      const auto r = Service<T>::error(res.status, httplib::status_message(res.status));
      res.set_content(r.body, r.content_type);
    }
  });
}

}  // namespace vlgen
