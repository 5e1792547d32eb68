#pragma once

#include "prn/align.hpp"
#include "prn/dataset.hpp"
#include "prn/geometry.hpp"
#include "prn/gradcheck.hpp"
#include "prn/loss.hpp"
#include "prn/metrics.hpp"
#include "prn/network.hpp"
#include "prn/train.hpp"
#include "prn/types.hpp"
