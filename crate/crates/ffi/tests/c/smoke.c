#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "idf_slam.h"

#define W 32
#define H 24

static const char *CONFIG =
    "init_map_iters = 3\n"
    "[mapper]\nrays_per_iter = 64\nsamples_per_ray = 16\nn_map_iters = 2\nn_pose_iters = 2\n";

int main(void) {
    static uint8_t rgb[W * H * 3];
    static float depth[W * H];
    for (int i = 0; i < W * H; i++) {
        int r = i / W, c = i % W;
        rgb[3 * i] = (uint8_t)(128 + 100 * sin(0.7 * c) * cos(0.5 * r));
        rgb[3 * i + 1] = (uint8_t)(r * 8);
        rgb[3 * i + 2] = (uint8_t)(c * 6);
        depth[i] = 2.0f;
    }
    IdfFrame frame = {0.0, {30.0, 30.0, 15.5, 11.5, W, H}, rgb, depth};
    IdfSlam *slam = NULL;
    IdfStatus s = idf_slam_new(CONFIG, &frame, &slam);
    if (s != IDF_STATUS_OK) {
        fprintf(stderr, "new: %d %s\n", s, idf_last_error());
        return 1;
    }
    frame.timestamp = 0.1;
    IdfFrameResult res;
    s = idf_slam_process_frame(slam, &frame, &res);
    if (s != IDF_STATUS_OK) {
        fprintf(stderr, "process: %d %s\n", s, idf_last_error());
        return 1;
    }
    if (idf_slam_trajectory_len(slam) != 2 || idf_slam_keyframe_count(slam) < 1) return 2;
    double p[3] = {0.0, 0.0, 1.0}, d = NAN;
    if (idf_slam_query_sdf(slam, p, 1, &d) != IDF_STATUS_OK || !isfinite(d)) return 3;
    frame.timestamp = 0.05;
    if (idf_slam_process_frame(slam, &frame, NULL) != IDF_STATUS_CONTRACT) return 4;
    idf_slam_free(slam);
    if (idf_slam_new(NULL, NULL, &slam) != IDF_STATUS_NULL_POINTER || slam != NULL) return 5;
    printf("ok %s\n", idf_version());
    return 0;
}
