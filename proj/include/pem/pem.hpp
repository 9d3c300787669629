#pragma once

#include "pem/builtin.hpp"
#include "pem/comms.hpp"
#include "pem/core.hpp"
#include "pem/devices.hpp"
#include "pem/engine.hpp"
#include "pem/output.hpp"
#include "pem/rng.hpp"
#include "pem/scenario.hpp"
#include "pem/server.hpp"
